//! Synthetic speech/text corpus with exact token alignment.
//!
//! Every content token owns a fixed block of `frames_per_token × F` feature
//! values; an utterance's frames are the concatenation of its tokens' blocks
//! plus Gaussian noise. Token sequences come from a sparse Markov chain so
//! that text carries learnable context.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SlamError};
use crate::nn::PaddingMask;
use crate::tensor::NdArray;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const MASK: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["[PAD]", "[CLS]", "[MASK]", "[UNK]"];
const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

/// Character vocabulary with the four reserved specials at ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocabulary {
    pub fn new(symbols: Vec<char>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, &c) in symbols.iter().enumerate() {
            if index.insert(c, NUM_SPECIALS + i).is_some() {
                return Err(SlamError::InvalidArgument(format!("duplicate symbol {c:?}")));
            }
        }
        Ok(Vocabulary { symbols, index })
    }

    /// The first `n` characters of `a-zA-Z0-9`.
    pub fn alphanumeric(n: usize) -> Result<Self> {
        if n == 0 || n > ALPHABET.len() {
            return Err(SlamError::Config(format!("content symbols must be in 1..={}, got {n}", ALPHABET.len())));
        }
        Self::new(ALPHABET.chars().take(n).collect())
    }

    /// Total id count including specials.
    pub fn size(&self) -> usize {
        NUM_SPECIALS + self.symbols.len()
    }

    pub fn num_content(&self) -> usize {
        self.symbols.len()
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn is_content(&self, id: usize) -> bool {
        (NUM_SPECIALS..self.size()).contains(&id)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                i if i < NUM_SPECIALS => out.push_str(SPECIAL_NAMES[i]),
                i => match self.symbols.get(i - NUM_SPECIALS) {
                    Some(&c) => out.push(c),
                    None => out.push_str(SPECIAL_NAMES[UNK]),
                },
            }
        }
        out
    }

    /// Short stable digest of the symbol table.
    pub fn hash(&self) -> String {
        let s: String = self.symbols.iter().collect();
        let digest = Sha256::digest(s.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub feature_dim: usize,
    pub content_symbols: usize,
    pub frames_per_token: usize,
    pub noise_sigma: f64,
    pub prototype_seed: u64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Successors per symbol in the text Markov chain.
    pub markov_successors: usize,
    pub n_speech: usize,
    pub n_text: usize,
    pub n_paired: usize,
    pub n_heldout: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            feature_dim: 16,
            content_symbols: 60,
            frames_per_token: 8,
            noise_sigma: 0.1,
            prototype_seed: 1234,
            min_tokens: 8,
            max_tokens: 32,
            markov_successors: 3,
            n_speech: 1000,
            n_text: 1000,
            n_paired: 1000,
            n_heldout: 1000,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SlamError::Config(m));
        if self.frames_per_token == 0 || self.frames_per_token % 4 != 0 {
            return bad(format!("frames_per_token must be a positive multiple of 4, got {}", self.frames_per_token));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad(format!("token range {}..={} is empty", self.min_tokens, self.max_tokens));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if self.markov_successors == 0 || self.markov_successors > self.content_symbols {
            return bad(format!("markov_successors must be in 1..={}", self.content_symbols));
        }
        Vocabulary::alphanumeric(self.content_symbols).map(|_| ())
    }

    pub fn vocab_size(&self) -> usize {
        NUM_SPECIALS + self.content_symbols
    }
}

/// A `T × F` block of feature frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Frames {
    pub len: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Frames {
    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

/// One corpus record. Speech-only records carry no tokens and text-only
/// records carry no frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: u64,
    pub tokens: Option<Vec<usize>>,
    pub frames: Option<Frames>,
    /// Frame interval `[start, end)` of every token.
    pub alignment: Option<Vec<(usize, usize)>>,
}

impl Example {
    pub fn tokens(&self) -> Result<&[usize]> {
        self.tokens.as_deref().ok_or_else(|| SlamError::InvalidArgument(format!("example {} has no transcript", self.id)))
    }

    pub fn frames(&self) -> Result<&Frames> {
        self.frames.as_ref().ok_or_else(|| SlamError::InvalidArgument(format!("example {} has no frames", self.id)))
    }
}

/// Token prototypes and the Markov chain, fixed by the prototype seed.
pub struct Generator {
    spec: SyntheticSpec,
    vocab: Vocabulary,
    /// `[content, frames_per_token × F]`.
    prototypes: Vec<f32>,
    /// Per content symbol: successor ids with cumulative weights.
    transitions: Vec<Vec<(usize, f64)>>,
}

impl Generator {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let vocab = Vocabulary::alphanumeric(spec.content_symbols)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.prototype_seed);
        let n = spec.content_symbols;
        let block = spec.frames_per_token * spec.feature_dim;
        let prototypes = (0..n * block).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>();
        let prototypes = prototypes.into_iter().map(|v| v as f32).collect();

        // Weights halve with each successor rank.
        let k = spec.markov_successors;
        let raw: Vec<f64> = (0..k).map(|i| 0.5f64.powi(i as i32)).collect();
        let total: f64 = raw.iter().sum();
        let mut transitions = Vec::with_capacity(n);
        for _ in 0..n {
            let succ = rand::seq::index::sample(&mut rng, n, k).into_vec();
            let mut acc = 0.0;
            let row = succ
                .into_iter()
                .zip(&raw)
                .map(|(s, w)| {
                    acc += w / total;
                    (NUM_SPECIALS + s, acc)
                })
                .collect();
            transitions.push(row);
        }
        Ok(Generator { spec: spec.clone(), vocab, prototypes, transitions })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn prototype(&self, token: usize) -> &[f32] {
        let block = self.spec.frames_per_token * self.spec.feature_dim;
        let i = token - NUM_SPECIALS;
        &self.prototypes[i * block..(i + 1) * block]
    }

    /// Probability of `next` following `prev` under the chain.
    pub fn transition_prob(&self, prev: usize, next: usize) -> f64 {
        let row = &self.transitions[prev - NUM_SPECIALS];
        let mut last = 0.0;
        for &(s, cum) in row {
            if s == next {
                return cum - last;
            }
            last = cum;
        }
        0.0
    }

    pub fn sample_tokens<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let len = rng.random_range(self.spec.min_tokens..=self.spec.max_tokens);
        let mut tokens = Vec::with_capacity(len);
        let mut cur = NUM_SPECIALS + rng.random_range(0..self.spec.content_symbols);
        tokens.push(cur);
        while tokens.len() < len {
            let u: f64 = rng.random();
            let row = &self.transitions[cur - NUM_SPECIALS];
            cur = row.iter().find(|&&(_, cum)| u < cum).unwrap_or(&row[row.len() - 1]).0;
            tokens.push(cur);
        }
        tokens
    }

    /// Prototype frames of `tokens` plus i.i.d. noise.
    pub fn render<R: Rng + ?Sized>(&self, tokens: &[usize], rng: &mut R) -> Frames {
        let dim = self.spec.feature_dim;
        let len = tokens.len() * self.spec.frames_per_token;
        let mut data = Vec::with_capacity(len * dim);
        for &t in tokens {
            data.extend_from_slice(self.prototype(t));
        }
        if self.spec.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, self.spec.noise_sigma).expect("valid sigma");
            for v in &mut data {
                *v += noise.sample(rng) as f32;
            }
        }
        Frames { len, dim, data }
    }

    pub fn alignment(&self, n_tokens: usize) -> Vec<(usize, usize)> {
        let f = self.spec.frames_per_token;
        (0..n_tokens).map(|i| (i * f, (i + 1) * f)).collect()
    }

    fn paired<R: Rng + ?Sized>(&self, id: u64, rng: &mut R) -> Example {
        let tokens = self.sample_tokens(rng);
        let frames = self.render(&tokens, rng);
        let alignment = self.alignment(tokens.len());
        Example { id, tokens: Some(tokens), frames: Some(frames), alignment: Some(alignment) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Speech,
    Text,
    Paired,
    Heldout,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Speech, Split::Text, Split::Paired, Split::Heldout];

    pub fn name(self) -> &'static str {
        match self {
            Split::Speech => "speech",
            Split::Text => "text",
            Split::Paired => "paired",
            Split::Heldout => "heldout",
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub speech: Vec<Example>,
    pub text: Vec<Example>,
    pub paired: Vec<Example>,
    pub heldout: Vec<Example>,
}

impl SyntheticCorpus {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Speech => &self.speech,
            Split::Text => &self.text,
            Split::Paired => &self.paired,
            Split::Heldout => &self.heldout,
        }
    }
}

/// Generates all four splits. Each split draws from its own stream of the
/// seeded generator so split sizes do not affect one another.
pub fn gen_synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus> {
    let gen = Generator::new(spec)?;
    let make = |split: Split, n: usize| -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(split.stream());
        (0..n as u64)
            .map(|id| {
                let mut ex = gen.paired(id, &mut rng);
                match split {
                    Split::Speech => {
                        ex.tokens = None;
                        ex.alignment = None;
                    }
                    Split::Text => {
                        ex.frames = None;
                        ex.alignment = None;
                    }
                    Split::Paired | Split::Heldout => {}
                }
                ex
            })
            .collect()
    };
    Ok(SyntheticCorpus {
        speech: make(Split::Speech, spec.n_speech),
        text: make(Split::Text, spec.n_text),
        paired: make(Split::Paired, spec.n_paired),
        heldout: make(Split::Heldout, spec.n_heldout),
    })
}

// ----------------------------------------------------------------------
// Corpus files
// ----------------------------------------------------------------------

const FRAME_MAGIC: &[u8; 8] = b"SLAMFRAM";
const FRAME_VERSION: u32 = 1;
const CORPUS_FORMAT: &str = "slam-corpus";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format: String,
    pub version: u32,
    pub feature_dim: usize,
    pub vocab_hash: String,
    pub symbols: String,
    pub spec: Option<SyntheticSpec>,
}

impl CorpusHeader {
    pub fn new(vocab: &Vocabulary, feature_dim: usize, spec: Option<SyntheticSpec>) -> Self {
        CorpusHeader {
            format: CORPUS_FORMAT.into(),
            version: FRAME_VERSION,
            feature_dim,
            vocab_hash: vocab.hash(),
            symbols: vocab.symbols.iter().collect(),
            spec,
        }
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.symbols.chars().collect())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: u64,
    text: Option<String>,
    frame_index: Option<usize>,
    alignment: Option<Vec<(usize, usize)>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub header: Option<CorpusHeader>,
    pub examples: Vec<Example>,
}

/// Sidecar frame file next to a transcript file.
pub fn frames_path(path: &Path) -> PathBuf {
    path.with_extension("frames")
}

/// Writes transcripts as JSON lines (header first) and frames to the binary
/// sidecar, when any example has frames.
pub fn write_corpus(path: &Path, header: &CorpusHeader, examples: &[Example]) -> Result<()> {
    let vocab = header.vocab()?;
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", serde_json::to_string(header).map_err(json_err)?)?;
    let mut frames_out: Option<BufWriter<File>> = None;
    let mut next_frame = 0;
    for ex in examples {
        let frame_index = match &ex.frames {
            Some(f) => {
                if f.dim != header.feature_dim {
                    return Err(SlamError::Shape(format!(
                        "example {} has {} features, header says {}",
                        ex.id, f.dim, header.feature_dim
                    )));
                }
                let w = match frames_out.as_mut() {
                    Some(w) => w,
                    None => {
                        let mut w = BufWriter::new(File::create(frames_path(path))?);
                        w.write_all(FRAME_MAGIC)?;
                        w.write_all(&FRAME_VERSION.to_le_bytes())?;
                        w.write_all(&(header.feature_dim as u32).to_le_bytes())?;
                        frames_out.insert(w)
                    }
                };
                w.write_all(&(f.len as u32).to_le_bytes())?;
                for v in &f.data {
                    w.write_all(&v.to_le_bytes())?;
                }
                next_frame += 1;
                Some(next_frame - 1)
            }
            None => None,
        };
        let rec = Record {
            id: ex.id,
            text: ex.tokens.as_ref().map(|t| vocab.detokenize(t)),
            frame_index,
            alignment: ex.alignment.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&rec).map_err(json_err)?)?;
    }
    out.flush()?;
    if let Some(mut w) = frames_out {
        w.flush()?;
    }
    Ok(())
}

fn json_err(e: serde_json::Error) -> SlamError {
    SlamError::Corrupt(e.to_string())
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| SlamError::Corrupt(format!("truncated frame file ({what})")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_frames(path: &Path, expected_dim: usize) -> Result<Vec<Frames>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| SlamError::Corrupt("frame file shorter than header".into()))?;
    if &magic != FRAME_MAGIC {
        return Err(SlamError::Corrupt(format!("{} is not a frame file", path.display())));
    }
    let version = read_u32(&mut r, "version")?;
    if version != FRAME_VERSION {
        return Err(SlamError::Version { found: version, expected: FRAME_VERSION });
    }
    let dim = read_u32(&mut r, "feature dim")? as usize;
    if dim != expected_dim {
        return Err(SlamError::Shape(format!("frame file has {dim} features, header says {expected_dim}")));
    }
    let mut out = Vec::new();
    loop {
        let mut b = [0u8; 4];
        match r.read(&mut b[..1])? {
            0 => break,
            _ => r.read_exact(&mut b[1..]).map_err(|_| SlamError::Corrupt("truncated frame record".into()))?,
        }
        let len = u32::from_le_bytes(b) as usize;
        let mut bytes = vec![0u8; len * dim * 4];
        r.read_exact(&mut bytes).map_err(|_| SlamError::Corrupt("truncated frame payload".into()))?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push(Frames { len, dim, data });
    }
    Ok(out)
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let file = BufReader::new(File::open(path)?);
    let mut lines = file.lines().enumerate();
    let header: CorpusHeader = match lines.next() {
        None => return Ok(Corpus { header: None, examples: Vec::new() }),
        Some((_, line)) => serde_json::from_str(&line?)
            .map_err(|e| SlamError::Malformed { line: 1, reason: format!("header: {e}") })?,
    };
    if header.format != CORPUS_FORMAT {
        return Err(SlamError::Malformed { line: 1, reason: format!("unknown format {:?}", header.format) });
    }
    let vocab = header.vocab()?;
    if vocab.hash() != header.vocab_hash {
        return Err(SlamError::Malformed { line: 1, reason: "vocabulary hash does not match symbols".into() });
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| SlamError::Malformed { line: i + 1, reason: e.to_string() })?;
        records.push((i + 1, rec));
    }
    let frames = if records.iter().any(|(_, r)| r.frame_index.is_some()) {
        read_frames(&frames_path(path), header.feature_dim)?
    } else {
        Vec::new()
    };
    let mut examples = Vec::with_capacity(records.len());
    for (line, rec) in records {
        let frames = match rec.frame_index {
            Some(i) => Some(
                frames
                    .get(i)
                    .cloned()
                    .ok_or_else(|| SlamError::Malformed { line, reason: format!("frame index {i} missing from sidecar") })?,
            ),
            None => None,
        };
        let tokens = rec.text.as_deref().map(|t| vocab.tokenize(t));
        examples.push(Example { id: rec.id, tokens, frames, alignment: rec.alignment });
    }
    Ok(Corpus { header: Some(header), examples })
}

/// Generator parameters and file list, written next to the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: SyntheticSpec,
    pub vocab_hash: String,
    pub splits: Vec<(String, usize)>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", split.name()))
}

/// Generates the corpus and writes every split plus a manifest into `dir`.
pub fn write_synthetic_corpus(dir: &Path, spec: &SyntheticSpec, seed: u64) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let corpus = gen_synthetic_corpus(spec, seed)?;
    let vocab = Vocabulary::alphanumeric(spec.content_symbols)?;
    let header = CorpusHeader::new(&vocab, spec.feature_dim, Some(spec.clone()));
    let mut splits = Vec::new();
    for split in Split::ALL {
        let ex = corpus.split(split);
        write_corpus(&split_path(dir, split), &header, ex)?;
        splits.push((split.name().to_string(), ex.len()));
    }
    let manifest = Manifest { seed, spec: spec.clone(), vocab_hash: vocab.hash(), splits };
    let text = serde_json::to_string_pretty(&manifest).map_err(json_err)?;
    fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
    Ok(manifest)
}

/// Reads every split written by [`write_synthetic_corpus`].
pub fn read_synthetic_corpus(dir: &Path) -> Result<(Manifest, SyntheticCorpus)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(json_err)?;
    let read = |split: Split| -> Result<Vec<Example>> {
        let c = read_corpus(&split_path(dir, split))?;
        if let Some(h) = &c.header {
            if h.feature_dim != manifest.spec.feature_dim {
                return Err(SlamError::Shape(format!(
                    "{} split has {} features, manifest says {}",
                    split.name(),
                    h.feature_dim,
                    manifest.spec.feature_dim
                )));
            }
        }
        Ok(c.examples)
    };
    let corpus = SyntheticCorpus {
        speech: read(Split::Speech)?,
        text: read(Split::Text)?,
        paired: read(Split::Paired)?,
        heldout: read(Split::Heldout)?,
    };
    Ok((manifest, corpus))
}

// ----------------------------------------------------------------------
// Batching
// ----------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SpeechBatch {
    /// `[B, T, F]`, zero-padded.
    pub frames: NdArray<f32>,
    pub lengths: Vec<usize>,
    pub ids: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct TextBatch {
    /// Row-major `[B, T']`, padded with [PAD].
    pub tokens: Vec<usize>,
    pub mask: PaddingMask,
    pub ids: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct PairedBatch {
    pub speech: SpeechBatch,
    pub text: TextBatch,
}

impl SpeechBatch {
    pub fn from_examples(examples: &[&Example], max_frames: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(SlamError::Empty("speech batch".into()));
        }
        let dim = examples[0].frames()?.dim;
        let lengths: Vec<usize> =
            examples.iter().map(|e| e.frames().map(|f| f.len.min(max_frames))).collect::<Result<_>>()?;
        let t = lengths.iter().copied().max().unwrap_or(0);
        let mut data = vec![0f32; examples.len() * t * dim];
        for (b, ex) in examples.iter().enumerate() {
            let f = ex.frames()?;
            if f.dim != dim {
                return Err(SlamError::Shape(format!("mixed feature dims {} and {dim}", f.dim)));
            }
            let n = lengths[b] * dim;
            data[b * t * dim..b * t * dim + n].copy_from_slice(&f.data[..n]);
        }
        Ok(SpeechBatch {
            frames: NdArray::new(&[examples.len(), t, dim], data)?,
            lengths,
            ids: examples.iter().map(|e| e.id).collect(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }
}

impl TextBatch {
    pub fn from_sequences(seqs: &[&[usize]], ids: Vec<u64>, max_tokens: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(SlamError::Empty("text batch".into()));
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len().min(max_tokens)).collect();
        let t = lengths.iter().copied().max().unwrap_or(0);
        let mut tokens = vec![PAD; seqs.len() * t];
        for (b, s) in seqs.iter().enumerate() {
            tokens[b * t..b * t + lengths[b]].copy_from_slice(&s[..lengths[b]]);
        }
        Ok(TextBatch { tokens, mask: PaddingMask::new(lengths, t)?, ids })
    }

    pub fn from_examples(examples: &[&Example], max_tokens: usize) -> Result<Self> {
        let seqs: Vec<&[usize]> = examples.iter().map(|e| e.tokens()).collect::<Result<_>>()?;
        Self::from_sequences(&seqs, examples.iter().map(|e| e.id).collect(), max_tokens)
    }

    pub fn batch_size(&self) -> usize {
        self.mask.batch()
    }

    /// Valid tokens of row `b`.
    pub fn row(&self, b: usize) -> &[usize] {
        let t = self.mask.max_len();
        &self.tokens[b * t..b * t + self.mask.lengths()[b]]
    }
}

impl PairedBatch {
    pub fn from_examples(examples: &[&Example], limits: &BatchLimits) -> Result<Self> {
        Ok(PairedBatch {
            speech: SpeechBatch::from_examples(examples, limits.max_frames)?,
            text: TextBatch::from_examples(examples, limits.max_tokens)?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.speech.batch_size()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchLimits {
    pub max_frames: usize,
    pub max_tokens: usize,
}

impl Default for BatchLimits {
    fn default() -> Self {
        BatchLimits { max_frames: 384, max_tokens: 48 }
    }
}

/// One epoch of index batches in shuffled order. The last batch may be
/// short.
pub fn make_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(SlamError::Empty("cannot batch an empty split".into()));
    }
    if batch_size == 0 {
        return Err(SlamError::InvalidArgument("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Position of a cyclic stream: epoch and batch within the epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamCursor {
    pub epoch: u64,
    pub batch: u64,
}

/// Endless batch stream over a split with a fresh shuffle every epoch. The
/// shuffle of epoch `e` depends only on `(seed, e)`, so a stream can be
/// resumed from its cursor.
#[derive(Clone, Debug)]
pub struct BatchStream {
    n: usize,
    batch_size: usize,
    seed: u64,
    cursor: StreamCursor,
    epoch_batches: Vec<Vec<usize>>,
}

impl BatchStream {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        let mut s = BatchStream { n, batch_size, seed, cursor: StreamCursor::default(), epoch_batches: Vec::new() };
        s.reshuffle()?;
        Ok(s)
    }

    fn reshuffle(&mut self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.cursor.epoch);
        let mut batches = make_batches(self.n, self.batch_size, &mut rng)?;
        // Drop a short tail so every batch has the same size.
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < self.batch_size) {
            batches.pop();
        }
        self.epoch_batches = batches;
        Ok(())
    }

    pub fn cursor(&self) -> StreamCursor {
        self.cursor
    }

    pub fn seek(&mut self, cursor: StreamCursor) -> Result<()> {
        self.cursor = cursor;
        self.reshuffle()?;
        if cursor.batch as usize > self.epoch_batches.len() {
            return Err(SlamError::InvalidArgument(format!("cursor {cursor:?} past end of epoch")));
        }
        Ok(())
    }

    pub fn next_indices(&mut self) -> Result<Vec<usize>> {
        if self.cursor.batch as usize >= self.epoch_batches.len() {
            self.cursor = StreamCursor { epoch: self.cursor.epoch + 1, batch: 0 };
            self.reshuffle()?;
        }
        let b = self.epoch_batches[self.cursor.batch as usize].clone();
        self.cursor.batch += 1;
        Ok(b)
    }
}
