//! Trains the desk configuration for a few steps and prints per-step losses.
//! Usage: `cargo run --release --example smoke -- [steps] [ss|wa]`.

use std::time::Instant;

use slam_core::config::Config;
use slam_core::data::gen_synthetic_corpus;
use slam_core::trainer::{StageSchedule, TrainData, Trainer};

fn main() -> slam_core::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let stage: String = std::env::args().nth(2).unwrap_or_else(|| "ss".into());
    let mut cfg = Config::default();
    if let Ok(s) = std::env::var("SMOKE_CONFIG") {
        cfg = Config::from_toml_str(&s)?;
    }
    let corpus = gen_synthetic_corpus(&cfg.synthetic_spec(), cfg.data_seed)?;
    let data = TrainData::from(corpus);
    let mut t = Trainer::new(cfg.model_config(), cfg.optimizer(), cfg.train_config(), cfg.seed)?;
    let schedule = match stage.as_str() {
        "wa" => StageSchedule::multi_stage(0, steps, 0)?,
        _ => StageSchedule::multi_stage(steps, 0, 0)?,
    };
    let start = Instant::now();
    t.run(&schedule, &data, None, &mut |_, r| {
        if r.step % 10 == 0 || r.step <= 3 {
            println!(
                "{:5} {:6.1}s bert {:.3} con {:.3} mlm {:.3} div {:.3} tlm {:.3}/{:.3} stm {:.3} ppl {:?} gn {:.2}",
                r.step,
                start.elapsed().as_secs_f64(),
                r.losses.bert,
                r.losses.w2v_contrastive,
                r.losses.w2v_mlm,
                r.losses.diversity,
                r.losses.tlm_text,
                r.losses.tlm_speech,
                r.losses.stm,
                r.code_perplexity.iter().map(|p| (p * 10.0).round() / 10.0).collect::<Vec<_>>(),
                r.grad_norm
            );
        }
        Ok(())
    })?;
    println!("{:.2}s per step", start.elapsed().as_secs_f64() / steps as f64);
    Ok(())
}
