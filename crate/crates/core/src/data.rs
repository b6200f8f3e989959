//! Vocabularies, fixed-length token sequences, batching and the synthetic
//! sequence-to-sequence tasks.

use std::collections::HashMap;
use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Result, SundaeError};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabKind {
    /// One token per Unicode scalar value.
    Char,
    /// Whitespace-separated tokens.
    Word,
}

/// Bijection between token strings and dense ids. Ids 0 and 1 are always
/// `<pad>` and `<unk>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    kind: VocabKind,
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from `tokens`, prefixed by the reserved entries.
    /// Duplicates and reserved literals in `tokens` are skipped.
    pub fn new<I, S>(kind: VocabKind, tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(tokens.into_iter().map(Into::into));
        let mut seen = HashMap::new();
        let mut kept = Vec::with_capacity(all.len());
        for t in all {
            if !seen.contains_key(&t) {
                seen.insert(t.clone(), kept.len() as TokenId);
                kept.push(t);
            }
        }
        Self { kind, tokens: kept, index: seen }
    }

    /// Exactly the given list, which must start with the reserved literals.
    pub fn from_token_list(kind: VocabKind, tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            bail_arg!("vocabulary must start with {PAD_TOKEN} and {UNK_TOKEN}");
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                bail_arg!("duplicate vocabulary entry {t:?}");
            }
        }
        Ok(Self { kind, tokens, index })
    }

    /// Character vocabulary covering every character of `lines`, sorted.
    pub fn chars_from_corpus<'a>(lines: impl IntoIterator<Item = &'a str>) -> Self {
        let mut chars: Vec<char> = lines.into_iter().flat_map(str::chars).collect();
        chars.sort_unstable();
        chars.dedup();
        Self::new(VocabKind::Char, chars.into_iter().map(String::from))
    }

    /// Word vocabulary of the `max_size - 2` most frequent words (ties by
    /// first appearance).
    pub fn words_from_corpus<'a>(lines: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        let mut counts: Vec<(String, usize, usize)> = Vec::new();
        let mut pos: HashMap<&str, usize> = HashMap::new();
        let lines: Vec<&str> = lines.into_iter().collect();
        for w in lines.iter().flat_map(|l| l.split_whitespace()) {
            match pos.get(w) {
                Some(&i) => counts[i].1 += 1,
                None => {
                    pos.insert(w, counts.len());
                    counts.push((w.to_string(), 1, counts.len()));
                }
            }
        }
        counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        let keep = max_size.saturating_sub(2);
        Self::new(VocabKind::Word, counts.into_iter().take(keep).map(|c| c.0))
    }

    /// Vocabulary for synthetic tasks: `v_task` single-letter (or `tN`) tokens
    /// with ids `2..2+v_task`.
    pub fn synthetic(v_task: usize) -> Self {
        let names = (0..v_task).map(|i| {
            if v_task <= 26 {
                char::from(b'a' + i as u8).to_string()
            } else {
                format!("t{i}")
            }
        });
        Self::new(VocabKind::Word, names)
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or(UNK_TOKEN, String::as_str)
    }

    /// Splits text into token strings according to the vocabulary kind.
    pub fn split<'a>(&self, text: &'a str) -> Vec<&'a str> {
        match self.kind {
            VocabKind::Word => text.split_whitespace().collect(),
            VocabKind::Char => text.char_indices().map(|(i, c)| &text[i..i + c.len_utf8()]).collect(),
        }
    }

    pub fn ids(&self, text: &str) -> Vec<TokenId> {
        self.split(text).into_iter().map(|t| self.id(t)).collect()
    }

    /// Renders ids up to the first PAD.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let content = ids.iter().take_while(|&&t| t != PAD);
        let parts: Vec<&str> = content.map(|&t| self.token(t)).collect();
        match self.kind {
            VocabKind::Char => parts.concat(),
            VocabKind::Word => parts.join(" "),
        }
    }

    /// Every position as a token string, space separated (PAD included).
    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&t| self.token(t)).collect::<Vec<_>>().join(" ")
    }

    /// Reads a vocabulary file: one token per line, line index = id.
    pub fn load(path: impl AsRef<Path>, kind: VocabKind) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens = text.lines().map(str::to_string).collect();
        Self::from_token_list(kind, tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(bad) = self.tokens.iter().find(|t| t.contains('\n')) {
            bail_arg!("token {bad:?} cannot be written to a line-oriented vocab file");
        }
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out)?;
        Ok(())
    }

    /// Restores the lookup table after deserialization.
    pub(crate) fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
    }
}

/// Fixed-length id sequence: a non-PAD content prefix followed by PAD.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    ids: Vec<TokenId>,
    content_len: usize,
}

impl TokenSeq {
    /// Crops `content` to `n` and pads the remainder.
    pub fn new(content: &[TokenId], n: usize) -> Result<Self> {
        if n == 0 {
            bail_arg!("sequence length must be at least 1");
        }
        if content.contains(&PAD) {
            bail_arg!("PAD inside sequence content");
        }
        let content_len = content.len().min(n);
        let mut ids = content[..content_len].to_vec();
        ids.resize(n, PAD);
        Ok(Self { ids, content_len })
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn content(&self) -> &[TokenId] {
        &self.ids[..self.content_len]
    }

    pub fn content_len(&self) -> usize {
        self.content_len
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Maps `text` through `vocab`, cropping to `n` and padding with PAD.
pub fn encode(text: &str, vocab: &Vocab, n: usize) -> Result<TokenSeq> {
    if vocab.size() <= 2 {
        bail_arg!("vocabulary has no content tokens");
    }
    TokenSeq::new(&vocab.ids(text), n)
}

/// Aligned source/target sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub sources: Vec<TokenSeq>,
    pub targets: Vec<TokenSeq>,
}

impl PairBatch {
    pub fn new(sources: Vec<TokenSeq>, targets: Vec<TokenSeq>) -> Result<Self> {
        if sources.len() != targets.len() || sources.is_empty() {
            bail_arg!("pair batch needs equal, nonzero source and target counts");
        }
        Ok(Self { sources, targets })
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn target_lengths(&self) -> Vec<usize> {
        self.targets.iter().map(TokenSeq::content_len).collect()
    }
}

/// Samples `batch_size` documents with replacement; documents longer than
/// `n` contribute a uniformly placed contiguous crop of exactly `n` tokens.
pub fn make_batch<R: Rng + ?Sized>(
    corpus: &[Vec<TokenId>],
    batch_size: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<TokenSeq>> {
    if corpus.is_empty() {
        bail_arg!("empty corpus");
    }
    if batch_size == 0 {
        bail_arg!("batch size must be positive");
    }
    (0..batch_size)
        .map(|_| {
            let doc = &corpus[rng.gen_range(0..corpus.len())];
            let start = if doc.len() > n { rng.gen_range(0..=doc.len() - n) } else { 0 };
            TokenSeq::new(&doc[start..], n)
        })
        .collect()
}

/// Samples `batch_size` pairs with replacement.
pub fn make_pair_batch<R: Rng + ?Sized>(
    pairs: &[(TokenSeq, TokenSeq)],
    batch_size: usize,
    rng: &mut R,
) -> Result<PairBatch> {
    if pairs.is_empty() {
        bail_arg!("empty pair set");
    }
    if batch_size == 0 {
        bail_arg!("batch size must be positive");
    }
    let (sources, targets) = (0..batch_size)
        .map(|_| pairs[rng.gen_range(0..pairs.len())].clone())
        .unzip();
    PairBatch::new(sources, targets)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    ReverseCipher,
}

impl std::str::FromStr for TaskKind {
    type Err = SundaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse_cipher" => Ok(Self::ReverseCipher),
            _ => Err(SundaeError::Argument(format!("unknown task {s:?}"))),
        }
    }
}

/// A deterministic synthetic translation task over task ids `2..2+v_task`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTask {
    pub kind: TaskKind,
    pub v_task: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seq_len: usize,
    /// `permutation[i]` is the cipher image of task symbol `i`.
    pub permutation: Vec<usize>,
}

impl SynthTask {
    /// The cipher permutation is derived from `task_seed`, so held-out sets
    /// drawn with other seeds share it.
    pub fn new(
        kind: TaskKind,
        v_task: usize,
        len_range: RangeInclusive<usize>,
        seq_len: usize,
        task_seed: u64,
    ) -> Result<Self> {
        let mut permutation: Vec<usize> = (0..v_task).collect();
        permutation.shuffle(&mut ChaCha8Rng::seed_from_u64(task_seed));
        Self::with_permutation(kind, v_task, len_range, seq_len, permutation)
    }

    pub fn with_permutation(
        kind: TaskKind,
        v_task: usize,
        len_range: RangeInclusive<usize>,
        seq_len: usize,
        permutation: Vec<usize>,
    ) -> Result<Self> {
        let (min_len, max_len) = (*len_range.start(), *len_range.end());
        if v_task == 0 {
            bail_arg!("task vocabulary must be nonempty");
        }
        if min_len == 0 || min_len > max_len || max_len > seq_len {
            bail_arg!("length range {min_len}..={max_len} must lie within [1, {seq_len}]");
        }
        let mut sorted = permutation.clone();
        sorted.sort_unstable();
        if sorted != (0..v_task).collect::<Vec<_>>() {
            bail_arg!("cipher is not a permutation of 0..{v_task}");
        }
        Ok(Self { kind, v_task, min_len, max_len, seq_len, permutation })
    }

    /// Model vocabulary size this task needs (task symbols plus PAD and UNK).
    pub fn vocab_size(&self) -> usize {
        self.v_task + 2
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::synthetic(self.v_task)
    }

    /// The unique correct target content for `source`.
    pub fn solve(&self, source: &[TokenId]) -> Vec<TokenId> {
        match self.kind {
            TaskKind::Copy => source.to_vec(),
            TaskKind::ReverseCipher => source
                .iter()
                .rev()
                .map(|&t| (self.permutation[(t - 2) as usize] + 2) as TokenId)
                .collect(),
        }
    }

    /// `count` pairs with source lengths uniform over the length range.
    pub fn generate(&self, seed: u64, count: usize) -> Result<Vec<(TokenSeq, TokenSeq)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let len = rng.gen_range(self.min_len..=self.max_len);
                let src: Vec<TokenId> =
                    (0..len).map(|_| rng.gen_range(2..2 + self.v_task as TokenId)).collect();
                let tgt = self.solve(&src);
                Ok((TokenSeq::new(&src, self.seq_len)?, TokenSeq::new(&tgt, self.seq_len)?))
            })
            .collect()
    }
}

/// Generates `count` pairs for a task; convenience over [`SynthTask`].
pub fn synth_task_gen(
    task_seed: u64,
    seed: u64,
    count: usize,
    kind: TaskKind,
    len_range: RangeInclusive<usize>,
    v_task: usize,
    vocab_size: usize,
    seq_len: usize,
) -> Result<Vec<(TokenSeq, TokenSeq)>> {
    if v_task + 2 > vocab_size {
        bail_arg!("task vocabulary {v_task} does not fit model vocabulary {vocab_size}");
    }
    SynthTask::new(kind, v_task, len_range, seq_len, task_seed)?.generate(seed, count)
}

/// Reads a corpus file (one document per line) into unpadded id lists.
/// Empty lines are skipped.
pub fn read_corpus(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<Vec<TokenId>>> {
    let text = fs::read_to_string(path)?;
    Ok(corpus_from_lines(text.lines(), vocab))
}

pub fn corpus_from_lines<'a>(lines: impl IntoIterator<Item = &'a str>, vocab: &Vocab) -> Vec<Vec<TokenId>> {
    lines
        .into_iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| vocab.ids(l).into_iter().filter(|&t| t != PAD).collect())
        .collect()
}

const DETERMINERS: [&str; 2] = ["the", "a"];
const ADJECTIVES: [&str; 4] = ["red", "big", "old", "shy"];
const NOUNS: [&str; 5] = ["cat", "dog", "fox", "owl", "hen"];
const VERBS: [&str; 4] = ["sees", "eats", "likes", "hugs"];

/// Sentences from a tiny fixed grammar (`det adj noun verb det noun`), at
/// most 25 characters each. Used as a toy language-modelling corpus.
pub fn toy_sentences(seed: u64, count: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            format!(
                "{} {} {} {} {} {}",
                DETERMINERS.choose(&mut rng).unwrap(),
                ADJECTIVES.choose(&mut rng).unwrap(),
                NOUNS.choose(&mut rng).unwrap(),
                VERBS.choose(&mut rng).unwrap(),
                DETERMINERS.choose(&mut rng).unwrap(),
                NOUNS.choose(&mut rng).unwrap(),
            )
        })
        .collect()
}
