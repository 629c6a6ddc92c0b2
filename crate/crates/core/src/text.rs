//! Text module: closed vocabulary, tokenization, MLM corruption and the text
//! transformer.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::nn::{key_bias, BlockDims, EncoderBlock, Initializer, LayerNorm};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
const RESERVED: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

/// Token table; ids are line numbers of the vocab file.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Reserved tokens followed by `words` (lowercased, deduplicated).
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Self::from_tokens(tokens).expect("reserved tokens are in place")
    }

    /// Full token table, reserved tokens included.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Data("vocab must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocab entry `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_reserved(id: u32) -> bool {
        (id as usize) < RESERVED.len()
    }

    /// Ids of ordinary (non-reserved) words.
    pub fn word_ids(&self) -> std::ops::Range<u32> {
        RESERVED.len() as u32..self.tokens.len() as u32
    }
}

/// Token ids with `[CLS]` at position 0; padding only at the tail.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Right-pads with `[PAD]` up to `len`.
    pub fn padded(&self, len: usize) -> TokenSequence {
        let mut out = self.clone();
        while out.ids.len() < len {
            out.ids.push(PAD);
            out.mask.push(false);
        }
        out
    }
}

/// Whitespace split, lowercase lookup with `[UNK]` fallback, `[CLS]` first,
/// truncated to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSequence> {
    if text.trim().is_empty() {
        return Err(Error::InvalidInput("cannot tokenize empty text".into()));
    }
    if max_len == 0 {
        return Err(Error::InvalidInput("max_len must be positive".into()));
    }
    let mut ids = vec![CLS];
    ids.extend(
        text.split_whitespace()
            .map(|w| vocab.id(&w.to_lowercase()).unwrap_or(UNK)),
    );
    ids.truncate(max_len);
    let mask = vec![true; ids.len()];
    Ok(TokenSequence { ids, mask })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    Mask,
    Random,
    Unchanged,
}

/// A text with some tokens corrupted for masked language modeling.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedText {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    /// Original token at selected positions, `None` elsewhere.
    pub labels: Vec<Option<u32>>,
    pub positions: Vec<usize>,
    pub corruptions: Vec<Corruption>,
}

/// Selects each non-reserved token with probability `p`; selected tokens
/// become `[MASK]` (80%), a random word (10%) or stay unchanged (10%).
pub fn mask_tokens<R: Rng + ?Sized>(seq: &TokenSequence, vocab: &Vocab, p: f64, rng: &mut R) -> MaskedText {
    let words = vocab.word_ids();
    let mut ids = seq.ids.clone();
    let mut labels = vec![None; ids.len()];
    let mut positions = Vec::new();
    let mut corruptions = Vec::new();
    for (i, &tok) in seq.ids.iter().enumerate() {
        if !seq.mask[i] || Vocab::is_reserved(tok) {
            continue;
        }
        if rng.random::<f64>() >= p {
            continue;
        }
        labels[i] = Some(tok);
        positions.push(i);
        let r: f64 = rng.random();
        let kind = if r < 0.8 {
            ids[i] = MASK;
            Corruption::Mask
        } else if r < 0.9 {
            ids[i] = rng.random_range(words.clone());
            Corruption::Random
        } else {
            Corruption::Unchanged
        };
        corruptions.push(kind);
    }
    MaskedText {
        ids,
        mask: seq.mask.clone(),
        labels,
        positions,
        corruptions,
    }
}

#[derive(Clone, Debug)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub layers: usize,
    pub eps: f64,
}

/// Encoded text: `[L, D]` features, `cls` = row 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures<T> {
    pub features: Tensor<T>,
    pub cls: Vec<T>,
}

/// Bidirectional text transformer. Also owns the output bias of the tied
/// MLM decoder, so every vocabulary-sized tensor lives under `text.`.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextConfig,
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub ln_final: LayerNorm,
    pub mlm_bias: ParamId,
}

/// Padded batch of token sequences.
#[derive(Clone, Debug)]
pub struct TextBatch {
    pub ids: Vec<u32>,
    pub live: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TextBatch {
    pub fn new<'a>(seqs: impl IntoIterator<Item = (&'a [u32], &'a [bool])>) -> Result<Self> {
        let seqs: Vec<_> = seqs.into_iter().collect();
        if seqs.is_empty() {
            return Err(Error::InvalidInput("empty text batch".into()));
        }
        let len = seqs.iter().map(|(ids, _)| ids.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut live = Vec::with_capacity(seqs.len() * len);
        for (s, m) in &seqs {
            if !m.iter().any(|&x| x) {
                return Err(Error::InvalidInput("all-pad text sequence".into()));
            }
            ids.extend_from_slice(s);
            live.extend_from_slice(m);
            for _ in s.len()..len {
                ids.push(PAD);
                live.push(false);
            }
        }
        Ok(Self {
            ids,
            live,
            batch: seqs.len(),
            len,
        })
    }

    pub fn key_bias<T: Real>(&self) -> Vec<T> {
        key_bias(&self.live)
    }
}

impl TextEncoder {
    pub fn new<T: Real, R: Rng>(init: &mut Initializer<'_, T, R>, config: TextConfig) -> Result<Self> {
        let d = config.dim;
        let dims = BlockDims {
            dim: d,
            heads: config.heads,
            hidden: config.hidden,
            eps: config.eps,
        };
        let token_embed = init.weight("text.token_embed", &[config.vocab_size, d])?;
        let pos_embed = init.weight("text.pos_embed", &[config.max_len, d])?;
        let blocks = (0..config.layers)
            .map(|i| EncoderBlock::new(init, &format!("text.layer{i}"), dims))
            .collect::<Result<Vec<_>>>()?;
        let ln_final = LayerNorm::new(init, "text.ln_final", d, config.eps)?;
        let mlm_bias = init.zeros("text.mlm_bias", &[config.vocab_size])?;
        Ok(Self {
            config,
            token_embed,
            pos_embed,
            blocks,
            ln_final,
            mlm_bias,
        })
    }

    /// Encodes a padded batch, `[B, L, D]`.
    pub fn encode_batch<T: Real>(&self, g: &mut Graph<'_, T>, batch: &TextBatch) -> Result<Var> {
        let c = &self.config;
        if batch.len > c.max_len {
            return Err(Error::Shape(format!("text length {} exceeds {}", batch.len, c.max_len)));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&id| id as usize >= c.vocab_size) {
            return Err(Error::InvalidInput(format!("token id {bad} outside vocab of {}", c.vocab_size)));
        }
        let table = g.param(self.token_embed);
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let x = g.select_rows(table, &ids)?;
        let x = g.reshape(x, &[batch.batch, batch.len, c.dim])?;
        let pos_table = g.param(self.pos_embed);
        let positions: Vec<usize> = (0..batch.len).collect();
        let pos = g.select_rows(pos_table, &positions)?;
        let mut x = g.add(x, pos)?;
        let bias = batch.key_bias::<T>();
        for block in &self.blocks {
            x = block.forward(g, x, Some(&bias))?;
        }
        if !self.blocks.is_empty() {
            x = self.ln_final.forward(g, x)?;
        }
        Ok(x)
    }

    pub fn encode_text<T: Real>(&self, params: &ParamStore<T>, seq: &TokenSequence) -> Result<TextFeatures<T>> {
        let batch = TextBatch::new([(seq.ids.as_slice(), seq.mask.as_slice())])?;
        let mut g = Graph::new(params);
        let x = self.encode_batch(&mut g, &batch)?;
        let features = g.value(x).clone().reshaped(&[batch.len, self.config.dim])?;
        let cls = features.row(0).to_vec();
        Ok(TextFeatures { features, cls })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocab {
        Vocab::new(&["red", "circle", "blue", "square"])
    }

    #[test]
    fn tokenize_basic() {
        let v = vocab();
        let s = tokenize("Red circle", &v, 16).unwrap();
        assert_eq!(s.ids, vec![CLS, v.id("red").unwrap(), v.id("circle").unwrap()]);
        let s = tokenize("red hexagon", &v, 16).unwrap();
        assert_eq!(s.ids[2], UNK);
        let long = vec!["red"; 40].join(" ");
        assert_eq!(tokenize(&long, &v, 16).unwrap().len(), 16);
        assert!(tokenize("   ", &v, 16).is_err());
    }

    #[test]
    fn reserved_ids_are_distinct_and_dense() {
        let v = vocab();
        assert_eq!(v.id("[PAD]"), Some(PAD));
        assert_eq!(v.id("[CLS]"), Some(CLS));
        assert_eq!(v.id("[SEP]"), Some(SEP));
        assert_eq!(v.id("[MASK]"), Some(MASK));
        assert_eq!(v.id("[UNK]"), Some(UNK));
        for i in 0..v.len() as u32 {
            assert_eq!(v.id(v.token(i).unwrap()), Some(i));
        }
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = vocab();
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
    }

    #[test]
    fn zero_probability_masks_nothing() {
        let v = vocab();
        let s = tokenize("red circle blue square", &v, 16).unwrap();
        let m = mask_tokens(&s, &v, 0.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(m.positions.is_empty());
        assert_eq!(m.ids, s.ids);
    }

    #[test]
    fn cls_and_pad_never_masked() {
        let v = vocab();
        let s = tokenize("red circle", &v, 16).unwrap().padded(6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let m = mask_tokens(&s, &v, 1.0, &mut rng);
            assert_eq!(m.ids[0], CLS);
            assert!(m.ids[3..].iter().all(|&t| t == PAD));
            assert_eq!(m.positions, vec![1, 2]);
            for (i, l) in m.labels.iter().enumerate() {
                assert_eq!(l.is_some(), m.positions.contains(&i));
            }
        }
    }

    #[test]
    fn text_batch_rejects_all_pad() {
        assert!(TextBatch::new([([PAD, PAD].as_slice(), [false, false].as_slice())]).is_err());
    }
}
