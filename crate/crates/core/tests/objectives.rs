mod common;

use common::{build, rng, tiny_batches, tiny_config};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use slam_core::data::{TextBatch, MASK, NUM_SPECIALS};
use slam_core::model::{LossWeights, QuantizeMode};
use slam_core::nn::Dropout;
use slam_core::objectives::*;
use slam_core::params::ParamStore;
use slam_core::tensor::{Graph, NdArray};
use slam_core::SlamError;

const DRAWS: usize = 10_000;

#[test]
fn text_spans_at_length_100_mask_fifteen_tokens() {
    let mut r = rng(1);
    for _ in 0..200 {
        let m = sample_text_spans(100, TEXT_RATIO, TEXT_SPAN, &mut r);
        assert_eq!(m.positions.len(), 15);
        assert!(m.positions.iter().all(|&p| p < 100));
    }
}

#[test]
fn text_spans_on_short_sequences_mask_at_least_one() {
    let mut r = rng(2);
    for len in 1..=6 {
        for _ in 0..50 {
            let m = sample_text_spans(len, TEXT_RATIO, TEXT_SPAN, &mut r);
            assert!(!m.positions.is_empty() && m.positions.len() <= len);
            assert!(m.is_contiguous());
        }
    }
}

#[test]
fn text_span_rate_matches_ratio() {
    let mut r = rng(3);
    let total: usize = (0..DRAWS).map(|_| sample_text_spans(100, TEXT_RATIO, TEXT_SPAN, &mut r).positions.len()).sum();
    let rate = total as f64 / (DRAWS * 100) as f64;
    assert!((rate - 0.15).abs() <= 0.01, "rate {rate}");
}

#[test]
fn text_spans_cover_every_position() {
    // Non-overlapping placement must still reach both sequence ends.
    let mut r = rng(4);
    let mut hits = [0usize; 40];
    for _ in 0..DRAWS {
        for p in sample_text_spans(40, TEXT_RATIO, TEXT_SPAN, &mut r).positions {
            hits[p] += 1;
        }
    }
    assert!(hits.iter().all(|&h| h > 0), "{hits:?}");
}

fn mean_coverage(len: usize, ratio: f64, span: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    (0..DRAWS).map(|_| sample_speech_spans(len, ratio, span, true, &mut r).coverage()).sum::<f64>() / DRAWS as f64
}

#[test]
fn speech_span_coverage_matches_ratio() {
    let c = mean_coverage(64, SPEECH_RATIO, SPEECH_SPAN, 5);
    assert!((0.45..=0.55).contains(&c), "coverage {c}");
    // Other lengths land on the target too, since the start count is
    // calibrated per length.
    for len in [20, 33, 96] {
        let c = mean_coverage(len, SPEECH_RATIO, SPEECH_SPAN, 6);
        assert!((c - 0.5).abs() < 0.02, "len {len}: {c}");
    }
}

#[test]
fn speech_spans_saturate_when_span_exceeds_length() {
    let mut r = rng(7);
    for len in 1..=10 {
        let m = sample_speech_spans(len, SPEECH_RATIO, SPEECH_SPAN, true, &mut r);
        assert_eq!(m.positions, (0..len).collect::<Vec<_>>());
    }
}

#[test]
fn speech_masks_stay_inside_valid_lengths() {
    let b = tiny_batches(4);
    let masks = sample_speech_masks(&b.speech, &mut rng(8));
    for (m, &frames) in masks.iter().zip(&b.speech.lengths) {
        let lat = slam_core::model::latent_len(frames);
        assert_eq!(m.len, lat);
        assert!(m.positions.iter().all(|&p| p < lat));
    }
}

#[test]
fn paired_text_mask_is_a_single_half_span() {
    let mut r = rng(9);
    for _ in 0..100 {
        let (_, text) = sample_paired_masks(64, 10, &mut r).unwrap();
        assert_eq!(text.positions.len(), 5);
        assert!(text.is_contiguous() && text.single_span);
    }
    let (_, text) = sample_paired_masks(64, 7, &mut r).unwrap();
    assert_eq!(text.positions.len(), 4);
}

#[test]
fn paired_speech_coverage_matches_ratio() {
    let mut r = rng(10);
    let c = (0..DRAWS).map(|_| sample_paired_masks(64, 10, &mut r).unwrap().0.coverage()).sum::<f64>() / DRAWS as f64;
    assert!((0.70..=0.80).contains(&c), "coverage {c}");
}

#[test]
fn paired_text_span_start_is_uniform() {
    let mut r = rng(11);
    let mut counts = [0f64; 6];
    for _ in 0..DRAWS {
        let (_, text) = sample_paired_masks(64, 10, &mut r).unwrap();
        counts[text.positions[0]] += 1.0;
    }
    let expected = DRAWS as f64 / 6.0;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    // 5 degrees of freedom, p = 0.001.
    assert!(chi2 < 20.515, "chi2 {chi2} counts {counts:?}");
}

#[test]
fn paired_masks_reject_short_inputs() {
    assert!(sample_paired_masks(1, 10, &mut rng(0)).is_err());
    assert!(sample_paired_masks(10, 1, &mut rng(0)).is_err());
}

#[test]
fn bert_replacement_follows_80_10_10() {
    let seqs: Vec<Vec<usize>> = (0..200).map(|i| (0..50).map(|t| NUM_SPECIALS + (i + t) % 8).collect()).collect();
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let batch = TextBatch::from_sequences(&refs, (0..200).collect(), 64).unwrap();
    let masks: Vec<MaskSpec> = (0..200).map(|_| sample_text_spans(50, 0.5, 5, &mut rng(0))).collect();
    let m = corrupt_text(&batch, &masks, 12, Replacement::Bert, &mut rng(12)).unwrap();
    let n = m.targets.len() as f64;
    let masked = m.targets.iter().filter(|&&(b, t, _)| m.input[b * 50 + t] == MASK).count() as f64;
    let kept = m.targets.iter().filter(|&&(b, t, o)| m.input[b * 50 + t] == o).count() as f64;
    assert!((masked / n - 0.8).abs() < 0.02, "{}", masked / n);
    // Random replacements equal the original 1/8 of the time.
    assert!((kept / n - (0.1 + 0.1 / 8.0)).abs() < 0.02, "{}", kept / n);
    assert!(m.input.iter().all(|&t| t == MASK || t >= NUM_SPECIALS));

    let only = corrupt_text(&batch, &masks, 12, Replacement::MaskOnly, &mut rng(12)).unwrap();
    assert!(only.targets.iter().all(|&(b, t, _)| only.input[b * 50 + t] == MASK));
}

fn contrastive_value(c: &[Vec<f64>], q: &[Vec<f64>], sampling: &NegativeSampling, kappa: f64) -> f64 {
    let d = c[0].len();
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let cv = g.constant(NdArray::new(&[c.len(), d], c.concat()).unwrap());
    let qv = g.constant(NdArray::new(&[q.len(), d], q.concat()).unwrap());
    let l = contrastive_loss(&mut g, cv, qv, sampling, kappa).unwrap().unwrap();
    g.scalar_value(l).unwrap()
}

fn unit(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

#[test]
fn contrastive_matches_direct_evaluation() {
    let c = vec![unit(4, 0), unit(4, 1)];
    let q = vec![unit(4, 0), unit(4, 1)];
    let sampling = NegativeSampling { anchors: vec![0], candidates: vec![Some(0)].into_iter().chain(vec![Some(1); 10]).collect(), k: 10 };
    let got = contrastive_value(&c, &q, &sampling, 0.1);
    let oracle = -(10f64.exp() / (10f64.exp() + 10.0)).ln();
    assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
    assert!((got - 4.54e-4).abs() < 1e-6);
}

#[test]
fn contrastive_with_equal_similarities_is_log_k_plus_one() {
    let c = vec![vec![1.0, 1.0, 0.0]; 5];
    let q = vec![vec![2.0, 2.0, 0.0]; 5];
    let anchors = vec![0, 1];
    let candidates = vec![Some(0), Some(1), Some(2), Some(3), Some(1), Some(0), Some(2), Some(4)];
    let got = contrastive_value(&c, &q, &NegativeSampling { anchors, candidates, k: 3 }, 0.1);
    assert!((got - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn contrastive_ignores_missing_candidates() {
    let c = vec![vec![1.0, 0.3], vec![0.2, 1.0], vec![-1.0, 0.5]];
    let q = vec![vec![0.9, 0.1], vec![0.4, 0.8], vec![-0.3, 1.0]];
    let padded = NegativeSampling { anchors: vec![0], candidates: vec![Some(0), Some(1), Some(2), None, None], k: 4 };
    let exact = NegativeSampling { anchors: vec![0], candidates: vec![Some(0), Some(1), Some(2)], k: 2 };
    assert!((contrastive_value(&c, &q, &padded, 0.1) - contrastive_value(&c, &q, &exact, 0.1)).abs() < 1e-12);
}

#[test]
fn contrastive_decreases_as_positive_similarity_rises() {
    let c = vec![vec![1.0, 0.0, 0.0]];
    let mut prev = f64::INFINITY;
    for step in 0..=10 {
        let a = std::f64::consts::PI * (1.0 - step as f64 / 10.0);
        let q = vec![vec![a.cos(), a.sin(), 0.0], vec![0.0, 0.0, 1.0], vec![0.5, 0.0, 0.5]];
        let sampling = NegativeSampling { anchors: vec![0], candidates: vec![Some(0), Some(1), Some(2)], k: 2 };
        let l = contrastive_value(&c, &q, &sampling, 0.1);
        assert!(l < prev, "step {step}: {l} !< {prev}");
        prev = l;
    }
}

proptest! {
    #[test]
    fn contrastive_is_invariant_to_negative_order(seed in 0u64..1000, vals in prop::collection::vec(-1.0f64..1.0, 18)) {
        let c: Vec<Vec<f64>> = vals[..9].chunks(3).map(<[f64]>::to_vec).collect();
        let q: Vec<Vec<f64>> = vals[9..].chunks(3).map(|v| v.iter().map(|x| x + 0.05).collect()).collect();
        let mut negs = vec![Some(1), Some(2), None];
        let base = NegativeSampling { anchors: vec![0], candidates: [vec![Some(0)], negs.clone()].concat(), k: 3 };
        negs.shuffle(&mut rng(seed));
        let shuffled = NegativeSampling { anchors: vec![0], candidates: [vec![Some(0)], negs].concat(), k: 3 };
        let a = contrastive_value(&c, &q, &base, 0.1);
        let b = contrastive_value(&c, &q, &shuffled, 0.1);
        prop_assert!((a - b).abs() < 1e-10);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn derangements_have_no_fixed_points(n in 2usize..40, seed in 0u64..1000) {
        let p = derangement(n, &mut rng(seed)).unwrap();
        let mut sorted = p.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        prop_assert!(p.iter().enumerate().all(|(i, &j)| i != j));
    }

    #[test]
    fn text_masks_are_valid(len in 1usize..200, seed in 0u64..1000) {
        let m = sample_text_spans(len, TEXT_RATIO, TEXT_SPAN, &mut rng(seed));
        prop_assert!(!m.positions.is_empty());
        prop_assert!(m.positions.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(*m.positions.last().unwrap() < len);
    }

    #[test]
    fn speech_masks_are_valid(len in 1usize..200, ratio in 0.05f64..0.95, seed in 0u64..1000) {
        let m = sample_speech_spans(len, ratio, SPEECH_SPAN, true, &mut rng(seed));
        prop_assert!(m.positions.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(m.positions.iter().all(|&p| p < len));
    }
}

#[test]
fn negatives_come_from_the_same_utterance() {
    let rows = vec![vec![0, 1, 2, 3, 4, 5], vec![10, 11, 12], vec![20]];
    let s = sample_negatives(&rows, 4, &mut rng(13));
    assert_eq!(s.anchors.len(), 9);
    assert_eq!(s.candidates.len(), 9 * 5);
    for (i, &a) in s.anchors.iter().enumerate() {
        let cands = &s.candidates[i * 5..(i + 1) * 5];
        assert_eq!(cands[0], Some(a));
        let utt = rows.iter().find(|r| r.contains(&a)).unwrap();
        let negs: Vec<usize> = cands[1..].iter().flatten().copied().collect();
        assert_eq!(negs.len(), 4.min(utt.len() - 1));
        assert!(negs.iter().all(|n| utt.contains(n) && *n != a));
        let mut dedup = negs.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), negs.len());
    }
    let none = sample_negatives(&[vec![3]], 4, &mut rng(0));
    assert!(none.anchors.is_empty());
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.constant(NdArray::zeros(&[4, 2]));
    assert!(contrastive_loss(&mut g, x, x, &none, 0.1).unwrap().is_none());
}

fn diversity_value(probs: &[f64], rows: usize, groups: usize, v: usize) -> (f64, Vec<f64>) {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let p = g.constant(NdArray::new(&[rows * groups, v], probs.to_vec()).unwrap());
    let (l, ppl) = diversity_loss(&mut g, p, &(0..rows).collect::<Vec<_>>(), groups).unwrap();
    (g.scalar_value(l).unwrap(), ppl)
}

#[test]
fn diversity_examples() {
    let v = 32;
    let (uniform, ppl) = diversity_value(&vec![1.0 / v as f64; 2 * v], 1, 2, v);
    assert!(uniform.abs() < 1e-9);
    assert!(ppl.iter().all(|p| (p - 32.0).abs() < 1e-6));

    let mut one_hot = vec![0.0; 2 * v];
    one_hot[3] = 1.0;
    one_hot[v + 7] = 1.0;
    let (l, ppl) = diversity_value(&one_hot, 1, 2, v);
    assert!((l - (1.0 - 1.0 / 32.0)).abs() < 1e-9);
    assert!(ppl.iter().all(|p| (p - 1.0).abs() < 1e-9));

    // Two one-hot rows per code over 16 codes average to uniform over half.
    let mut half = Vec::new();
    for r in 0..16 {
        for _ in 0..2 {
            let mut row = vec![0.0; v];
            row[r * 2] = 1.0;
            half.extend(row);
        }
    }
    let (l, ppl) = diversity_value(&half, 16, 2, v);
    assert!((l - 0.5).abs() < 1e-9, "{l}");
    assert!(ppl.iter().all(|p| (p - 16.0).abs() < 1e-6));
}

#[test]
fn diversity_rejects_empty_rows() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let p = g.constant(NdArray::full(&[4, 4], 0.25));
    assert!(matches!(diversity_loss(&mut g, p, &[], 2), Err(SlamError::Empty(_))));
}

#[test]
fn bert_loss_is_mean_ce_over_masked_positions() {
    let (model, store) = build::<f64>(tiny_config(), 1);
    let b = tiny_batches(3);
    let masks = sample_text_masks(&b.text, &mut rng(14));
    let masked = corrupt_text(&b.text, &masks, 12, Replacement::Bert, &mut rng(15)).unwrap();
    let mut g = Graph::new(&store);
    let loss = bert_loss(&mut g, &model, &b.text, &masked, &mut Dropout::off()).unwrap();
    let got = g.scalar_value(loss).unwrap();

    // Oracle: log-softmax of the full text logits, read at masked rows only.
    let mut g2 = Graph::new(&store);
    let w = model.text_encode(&mut g2, &masked.input, &b.text.mask).unwrap();
    let out = model.multimodal_encode(&mut g2, None, Some((w.w, &w.mask)), false, &mut Dropout::off()).unwrap();
    let all_rows: Vec<usize> = (0..out.mask.batch() * out.mask.max_len()).collect();
    let h = model.gather(&mut g2, out.h, &all_rows).unwrap();
    let logits = model.mlm_text_head(&mut g2, h).unwrap();
    let lv = g2.value(logits).to_f64_vec();
    let t = out.mask.max_len();
    let oracle: f64 = masked
        .targets
        .iter()
        .map(|&(bi, ti, tok)| {
            let row = &lv[(bi * t + ti) * 12..(bi * t + ti + 1) * 12];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            lse - row[tok]
        })
        .sum::<f64>()
        / masked.targets.len() as f64;
    assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
    // Near chance at initialisation.
    assert!((got - 12f64.ln()).abs() < 0.3, "{got}");

    // Unmasked original tokens do not enter the loss.
    let mut altered = b.text.clone();
    let flags: Vec<Vec<bool>> = masks.iter().map(MaskSpec::flags).collect();
    for (bi, f) in flags.iter().enumerate() {
        for (ti, &m) in f.iter().enumerate() {
            if !m {
                altered.tokens[bi * t + ti] = NUM_SPECIALS;
            }
        }
    }
    let mut g3 = Graph::new(&store);
    let l3 = bert_loss(&mut g3, &model, &altered, &masked, &mut Dropout::off()).unwrap();
    assert_eq!(g3.scalar_value(l3).unwrap(), got);
}

#[test]
fn bert_loss_rejects_empty_masks() {
    let (model, store) = build::<f64>(tiny_config(), 1);
    let b = tiny_batches(2);
    let masked = MaskedText { input: b.text.tokens.clone(), targets: vec![] };
    let mut g = Graph::new(&store);
    assert!(matches!(bert_loss(&mut g, &model, &b.text, &masked, &mut Dropout::off()), Err(SlamError::Empty(_))));
}

#[test]
fn w2v_targets_do_not_depend_on_masking() {
    let (model, store) = build::<f64>(tiny_config(), 2);
    let b = tiny_batches(3);
    let mut targets = Vec::new();
    for seed in [16, 17] {
        let masks: Vec<MaskSpec> = b
            .speech
            .lengths
            .iter()
            .map(|&l| sample_speech_spans(slam_core::model::latent_len(l), 0.5, 2, true, &mut rng(seed)))
            .collect();
        let mut g = Graph::new(&store);
        let mut noise = rng(seed);
        let mut neg = rng(seed + 100);
        let out = w2v_bert_loss(
            &mut g,
            &model,
            &b.speech,
            &masks,
            QuantizeMode { tau: 2.0, noise: Some(&mut noise), hard: true },
            &mut neg,
            &mut Dropout::off(),
        )
        .unwrap();
        let mlm = g.scalar_value(out.mlm).unwrap();
        assert!((mlm - 4f64.ln()).abs() < 0.3, "mlm {mlm}");
        assert!(g.scalar_value(out.contrastive.unwrap()).unwrap() >= 0.0);
        let div = g.scalar_value(out.diversity).unwrap();
        assert!((0.0..=0.75).contains(&div));
        assert_eq!(out.perplexity.len(), 2);
        targets.push(out.targets);
    }
    assert_eq!(targets[0], targets[1]);
}

#[test]
fn tlm_losses_are_finite_and_need_masks() {
    let (model, store) = build::<f64>(tiny_config(), 3);
    let b = tiny_batches(3);
    let mut r = rng(18);
    let mut speech_masks = Vec::new();
    let mut text_masks = Vec::new();
    for (i, &frames) in b.paired.speech.lengths.iter().enumerate() {
        let (s, t) = sample_paired_masks(slam_core::model::latent_len(frames), b.paired.text.mask.lengths()[i], &mut r).unwrap();
        speech_masks.push(s);
        text_masks.push(t);
    }
    let masked = corrupt_text(&b.paired.text, &text_masks, 12, Replacement::Bert, &mut r).unwrap();
    let mut g = Graph::new(&store);
    let out = tlm_loss(&mut g, &model, &b.paired, &speech_masks, &masked, &mut Dropout::off()).unwrap();
    for v in [out.text, out.speech] {
        let x = g.scalar_value(v).unwrap();
        assert!(x.is_finite() && x >= 0.0);
    }

    let empty: Vec<MaskSpec> = speech_masks.iter().map(|m| MaskSpec { positions: vec![], ..m.clone() }).collect();
    let unmasked = MaskedText { input: b.paired.text.tokens.clone(), targets: vec![] };
    let mut g = Graph::new(&store);
    assert!(matches!(
        tlm_loss(&mut g, &model, &b.paired, &empty, &unmasked, &mut Dropout::off()),
        Err(SlamError::Empty(_))
    ));
}

#[test]
fn stm_batches_mismatch_only_negatives() {
    let b = tiny_batches(8);
    for seed in 0..20 {
        let stm = make_stm_batch(&b.paired, 0.5, &mut rng(seed)).unwrap();
        let mismatched = stm.labels.iter().filter(|&&l| l == 0).count();
        assert!(mismatched <= 4);
        for i in 0..8 {
            let same = stm.text.row(i) == b.paired.text.row(i);
            assert_eq!(stm.labels[i] == 1, same);
        }
    }
    let one = tiny_batches(1);
    assert!(make_stm_batch(&one.paired, 0.5, &mut rng(0)).is_err());
}

#[test]
fn stm_loss_examples() {
    let (model, mut store) = build::<f64>(tiny_config(), 4);
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.starts_with("heads.stm")).map(|(id, _)| id).collect();
    for id in ids {
        store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let b = tiny_batches(4);
    let stm = make_stm_batch(&b.paired, 0.5, &mut rng(19)).unwrap();
    let mut g = Graph::new(&store);
    let out = stm_loss(&mut g, &model, &b.paired.speech, &stm, &mut Dropout::off()).unwrap();
    assert!((g.scalar_value(out.loss).unwrap() - 2f64.ln()).abs() < 1e-12);

    let mut g = Graph::new(&store);
    let l = g.constant(NdArray::from_f64(&[1, 2], &[-40.0, 40.0]).unwrap());
    let ce = g.cross_entropy(l, &[1]).unwrap();
    assert!(g.scalar_value(ce).unwrap() < 1e-30);
}

#[test]
fn loss_bundle_total_is_the_weighted_sum() {
    let mut bundle = LossBundle { bert: 1.5, w2v_contrastive: 2.0, w2v_mlm: 0.25, diversity: 0.5, ..LossBundle::default() };
    let w = LossWeights::default();
    bundle.finalize(&w).unwrap();
    assert_eq!(bundle.total, 1.5 + 2.0 + 0.25 + 0.1 * 0.5);
    assert_eq!(bundle.tlm_text, 0.0);
    assert_eq!(bundle.get("diversity"), Some(0.5));
    bundle.stm = f64::NAN;
    assert!(matches!(bundle.finalize(&w), Err(SlamError::NonFinite(_))));
}
