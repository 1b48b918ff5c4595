//! Corpus, word-level vocabulary, batching, and the fixed held-out eval set.

use crate::error::{Error, Result};
use crate::rng::SeedStreams;
use sha2::{Digest, Sha256};
use std::collections::HashMap;

/// Bundled training corpus (UTF-8 plain text).
pub fn bundled_corpus_text() -> &'static str {
    include_str!("../assets/corpus.txt")
}

/// Bundled eval set, one sentence per line.
pub fn bundled_eval_text() -> &'static str {
    include_str!("../assets/eval.txt")
}

/// Bundled generation prompts, one per line.
pub fn bundled_prompts_text() -> &'static str {
    include_str!("../assets/prompts.txt")
}

/// Word-level vocabulary. Word ids are assigned by first occurrence; the four
/// special ids (pad, bos, eos, unk) sit after the words.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    n_words: usize,
}

impl Vocabulary {
    pub fn build(corpus: &str) -> Result<Self> {
        let tokens = tokenize(corpus);
        if tokens.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut token_to_id = HashMap::new();
        let mut id_to_token = Vec::new();
        for tok in tokens {
            if !token_to_id.contains_key(&tok) {
                token_to_id.insert(tok.clone(), id_to_token.len() as u32);
                id_to_token.push(tok);
            }
        }
        let n_words = id_to_token.len();
        for special in ["<pad>", "<bos>", "<eos>", "<unk>"] {
            token_to_id.insert(special.to_string(), id_to_token.len() as u32);
            id_to_token.push(special.to_string());
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
            n_words,
        })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn n_words(&self) -> usize {
        self.n_words
    }

    pub fn pad_id(&self) -> u32 {
        self.n_words as u32
    }

    pub fn bos_id(&self) -> u32 {
        self.n_words as u32 + 1
    }

    pub fn eos_id(&self) -> u32 {
        self.n_words as u32 + 2
    }

    pub fn unk_id(&self) -> u32 {
        self.n_words as u32 + 3
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    /// Encode text; out-of-vocabulary words map to the unknown id. Returns
    /// the ids and the OOV count.
    pub fn encode_counting(&self, text: &str) -> (Vec<u32>, usize) {
        let mut oov = 0;
        let ids = tokenize(text)
            .into_iter()
            .map(|tok| match self.token_to_id.get(&tok) {
                Some(&id) if (id as usize) < self.n_words => id,
                _ => {
                    oov += 1;
                    self.unk_id()
                }
            })
            .collect();
        (ids, oov)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_counting(text).0
    }

    /// Inverse of `encode` on in-vocabulary text; specials are skipped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| (id as usize) < self.n_words)
            .map(|&id| self.id_to_token[id as usize].as_str())
            .collect();
        words.join(" ")
    }
}

/// Lowercased word-level tokens; punctuation characters are their own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                cur.push(lc);
            }
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// A tokenized corpus with its vocabulary.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub tokens: Vec<u32>,
}

impl Corpus {
    pub fn from_text(text: &str) -> Result<Self> {
        let vocab = Vocabulary::build(text)?;
        let (tokens, _) = vocab.encode_counting(text);
        Ok(Corpus { vocab, tokens })
    }
}

/// The fixed held-out sentence set. Hash is recorded in every report;
/// perplexity numbers are only comparable at equal hash.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub sentences: Vec<String>,
    pub token_ids: Vec<Vec<u32>>,
    pub oov_count: usize,
    pub hash: String,
}

impl EvalSet {
    /// One sentence per non-empty line.
    pub fn from_text(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let sentences: Vec<String> = text
            .lines()
            .map(|l| l.trim())
            .filter(|l| !l.is_empty())
            .map(|l| l.to_string())
            .collect();
        if sentences.is_empty() {
            return Err(Error::EmptyEvalSet);
        }
        let normalized = sentences.join("\n");
        let hash = hex_digest(normalized.as_bytes());
        let mut oov_count = 0;
        let token_ids = sentences
            .iter()
            .map(|s| {
                let (ids, oov) = vocab.encode_counting(s);
                oov_count += oov;
                ids
            })
            .collect();
        Ok(EvalSet {
            sentences,
            token_ids,
            oov_count,
            hash,
        })
    }

    pub fn token_counts(&self) -> Vec<usize> {
        self.token_ids.iter().map(|ids| ids.len()).collect()
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic train/val block scheduler.
///
/// Blocks tile the token stream with stride `block_size`; a block supplies
/// `block_size` inputs and the same tokens shifted by one as targets. The
/// train/val split is 90/10 by block, seeded, and the per-epoch block order
/// is a seeded shuffle. Steps per epoch is `floor(train_blocks / batch_size)`.
#[derive(Debug, Clone)]
pub struct Batcher {
    tokens: Vec<u32>,
    pub block_size: usize,
    pub batch_size: usize,
    train_blocks: Vec<usize>,
    val_blocks: Vec<usize>,
    streams: SeedStreams,
}

impl Batcher {
    pub fn new(tokens: &[u32], block_size: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if tokens.len() <= block_size {
            return Err(Error::CorpusTooShort {
                tokens: tokens.len(),
                block_size,
            });
        }
        let num_blocks = (tokens.len() - 1) / block_size;
        let mut blocks: Vec<usize> = (0..num_blocks).map(|b| b * block_size).collect();
        let streams = SeedStreams::new(seed);
        shuffle(&mut blocks, &mut streams.stream("split"));
        let n_val = (num_blocks / 10).max(1).min(num_blocks - 1);
        let val_blocks = blocks.split_off(num_blocks - n_val);
        let train_blocks = blocks;
        if train_blocks.len() < batch_size {
            return Err(Error::InvalidArgument(format!(
                "batch size {batch_size} exceeds {} train blocks",
                train_blocks.len()
            )));
        }
        Ok(Batcher {
            tokens: tokens.to_vec(),
            block_size,
            batch_size,
            train_blocks,
            val_blocks,
            streams,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_blocks.len() / self.batch_size
    }

    pub fn train_block_count(&self) -> usize {
        self.train_blocks.len()
    }

    pub fn val_block_count(&self) -> usize {
        self.val_blocks.len()
    }

    /// Training batch for a global step index: pure function of
    /// (corpus, block/batch size, seed, step).
    pub fn batch_at(&self, step: usize) -> (Vec<u32>, Vec<u32>) {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let idx = step % spe;
        let mut order = self.train_blocks.clone();
        shuffle(&mut order, &mut self.streams.stream_indexed("epoch", epoch as u64));
        self.gather(&order[idx * self.batch_size..(idx + 1) * self.batch_size])
    }

    /// All validation blocks in fixed order, batched.
    pub fn val_batches(&self) -> Vec<(Vec<u32>, Vec<u32>)> {
        self.val_blocks
            .chunks(self.batch_size)
            .map(|chunk| self.gather(chunk))
            .collect()
    }

    fn gather(&self, starts: &[usize]) -> (Vec<u32>, Vec<u32>) {
        let bs = self.block_size;
        let mut input = Vec::with_capacity(starts.len() * bs);
        let mut target = Vec::with_capacity(starts.len() * bs);
        for &s in starts {
            input.extend_from_slice(&self.tokens[s..s + bs]);
            target.extend_from_slice(&self.tokens[s + 1..s + bs + 1]);
        }
        (input, target)
    }
}

fn shuffle<T>(items: &mut [T], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
