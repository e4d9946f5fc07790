//! Argument-pair tokenization and the contextual encoder.
//!
//! A pair is laid out as `[CLS, arg1.., SEP, SEP, arg2.., EOS]`. Segment 0
//! covers CLS through the first SEP, segment 1 the second SEP through EOS.
//! After encoding, the rows are split back at the SEP/SEP boundary so that
//! arg1 keeps `M + 2` rows (CLS .. SEP) and arg2 keeps `N + 2` rows
//! (SEP .. EOS).

use std::collections::HashMap;
use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BmgfError, Result};
use crate::layers::{ForwardCtx, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Tensor, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const EOS: usize = 4;
pub const RESERVED_TOKENS: [&str; 5] = ["<pad>", "<unk>", "<cls>", "<sep>", "<eos>"];

/// Lowercases, splits on whitespace and emits every punctuation character as
/// its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens first, then corpus tokens by descending frequency
    /// (ties in lexical order).
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut entries: Vec<_> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !RESERVED_TOKENS.contains(&t.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens).expect("reserved prefix present")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED_TOKENS.len()
            || tokens.iter().zip(RESERVED_TOKENS).any(|(t, r)| t != r)
        {
            return Err(BmgfError::Input(format!(
                "vocabulary must start with the reserved tokens {RESERVED_TOKENS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(BmgfError::Input(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Newline-delimited tokens; the line number is the id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| BmgfError::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| BmgfError::io(path, e))
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Token ids of an argument pair in the joint layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedPair {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    /// Arg1 token count after truncation.
    pub m: usize,
    /// Arg2 token count after truncation.
    pub n: usize,
}

/// Shrinks `(m, n)` proportionally so that `m + n <= budget`, keeping at
/// least one token per argument.
fn truncate_lengths(m: usize, n: usize, budget: usize) -> (usize, usize) {
    if m + n <= budget {
        return (m, n);
    }
    let m1 = (budget * m / (m + n)).clamp(1, m);
    let n1 = n.min(budget - m1);
    let m1 = m.min(budget - n1);
    (m1, n1)
}

impl TokenizedPair {
    pub fn from_ids(arg1: &[usize], arg2: &[usize]) -> Result<Self> {
        if arg1.is_empty() || arg2.is_empty() {
            return Err(BmgfError::Input("both arguments must contain at least one token".into()));
        }
        let (m, n) = (arg1.len(), arg2.len());
        let mut token_ids = Vec::with_capacity(m + n + 4);
        token_ids.push(CLS);
        token_ids.extend_from_slice(arg1);
        token_ids.extend([SEP, SEP]);
        token_ids.extend_from_slice(arg2);
        token_ids.push(EOS);
        let segment_ids = (0..token_ids.len()).map(|t| usize::from(t > m + 1)).collect();
        Ok(TokenizedPair { token_ids, segment_ids, m, n })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn arg1_span(&self) -> RangeInclusive<usize> {
        0..=self.m + 1
    }

    pub fn arg2_span(&self) -> RangeInclusive<usize> {
        self.m + 2..=self.m + self.n + 3
    }

    pub fn arg1_ids(&self) -> &[usize] {
        &self.token_ids[1..=self.m]
    }

    pub fn arg2_ids(&self) -> &[usize] {
        &self.token_ids[self.m + 3..self.m + 3 + self.n]
    }

    /// `[CLS, tokens.., EOS]` sequences used by the siamese encoder.
    pub fn siamese_ids(&self) -> (Vec<usize>, Vec<usize>) {
        let wrap = |ids: &[usize]| {
            let mut v = Vec::with_capacity(ids.len() + 2);
            v.push(CLS);
            v.extend_from_slice(ids);
            v.push(EOS);
            v
        };
        (wrap(self.arg1_ids()), wrap(self.arg2_ids()))
    }

    /// Right-pads to `len` with PAD tokens; the mask is true at PAD positions.
    pub fn padded(&self, len: usize) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
        let mut ids = self.token_ids.clone();
        let mut segs = self.segment_ids.clone();
        let mut pad = vec![false; ids.len()];
        while ids.len() < len {
            ids.push(PAD);
            segs.push(1);
            pad.push(true);
        }
        (ids, segs, pad)
    }
}

pub fn tokenize_pair(arg1: &str, arg2: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenizedPair> {
    if max_len < 6 {
        return Err(BmgfError::Input(format!("max_len {max_len} cannot hold two non-empty arguments")));
    }
    let a1: Vec<usize> = tokenize(arg1).iter().map(|t| vocab.id(t)).collect();
    let a2: Vec<usize> = tokenize(arg2).iter().map(|t| vocab.id(t)).collect();
    if a1.is_empty() || a2.is_empty() {
        return Err(BmgfError::Input(format!(
            "empty argument after normalization (arg1 {:?}, arg2 {:?})",
            arg1, arg2
        )));
    }
    let (m, n) = truncate_lengths(a1.len(), a2.len(), max_len - 4);
    TokenizedPair::from_ids(&a1[..m], &a2[..n])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    #[default]
    Joint,
    Siamese,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub use_segment_embeddings: bool,
    pub mode: EncoderMode,
    pub freeze_encoder: bool,
}

/// Contextualized rows of the two arguments.
#[derive(Clone, Copy, Debug)]
pub struct ContextualizedPair {
    /// `(M + 2) x d`: CLS, arg1 tokens, SEP.
    pub h1: Var,
    /// `(N + 2) x d`: SEP, arg2 tokens, EOS (CLS .. EOS in siamese mode).
    pub h2: Var,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Pre-norm transformer stack over token + position (+ segment) embeddings.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    token_embedding: ParamId,
    position_embedding: ParamId,
    segment_embedding: Option<ParamId>,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let d = config.d_model;
        if config.vocab_size == 0 || d == 0 || config.max_len == 0 {
            return Err(BmgfError::Config("encoder dimensions must be positive".into()));
        }
        let token_embedding = store.add("encoder.token_embedding", &[config.vocab_size, d], Init::Normal(0.02), true, rng);
        let position_embedding = store.add("encoder.position_embedding", &[config.max_len, d], Init::Normal(0.02), true, rng);
        let segment_embedding = config
            .use_segment_embeddings
            .then(|| store.add("encoder.segment_embedding", &[2, d], Init::Normal(0.02), true, rng));
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("encoder.layers.{i}");
            layers.push(EncoderLayer {
                norm1: LayerNorm::new(store, &format!("{p}.norm1"), d, rng),
                attn: MultiHeadAttention::new(store, &format!("{p}.attention"), d, config.heads, rng)?,
                norm2: LayerNorm::new(store, &format!("{p}.norm2"), d, rng),
                ff_in: Linear::new(store, &format!("{p}.ff_in"), d, config.ff_dim, true, rng),
                ff_out: Linear::new(store, &format!("{p}.ff_out"), config.ff_dim, d, true, rng),
            });
        }
        let final_norm = LayerNorm::new(store, "encoder.final_norm", d, rng);
        let encoder = Encoder { config, token_embedding, position_embedding, segment_embedding, layers, final_norm };
        if encoder.config.freeze_encoder {
            for id in encoder.params() {
                if Some(id) != encoder.segment_embedding {
                    store.set_trainable(id, false);
                }
            }
        }
        Ok(encoder)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_embedding, self.position_embedding];
        ids.extend(self.segment_embedding);
        for l in &self.layers {
            ids.extend(l.norm1.params());
            ids.extend(l.attn.params());
            ids.extend(l.norm2.params());
            ids.extend(l.ff_in.params());
            ids.extend(l.ff_out.params());
        }
        ids.extend(self.final_norm.params());
        ids
    }

    /// Row `t` is `token[id_t] + position[t] (+ segment[seg_t])`.
    pub fn embed(&self, g: &mut Graph, token_ids: &[usize], segment_ids: &[usize]) -> Result<Var> {
        let len = token_ids.len();
        if len == 0 || segment_ids.len() != len {
            return Err(BmgfError::Input(format!("{len} tokens with {} segment ids", segment_ids.len())));
        }
        if len > self.config.max_len {
            return Err(BmgfError::Input(format!(
                "sequence of {len} positions exceeds max length {}",
                self.config.max_len
            )));
        }
        if let Some(bad) = token_ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(BmgfError::Input(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        let table = g.param(self.token_embedding);
        let tokens = g.gather_rows(table, token_ids)?;
        let positions_table = g.param(self.position_embedding);
        let positions: Vec<usize> = (0..len).collect();
        let positions = g.gather_rows(positions_table, &positions)?;
        let mut x = g.add(tokens, positions)?;
        if let Some(seg) = self.segment_embedding {
            if let Some(bad) = segment_ids.iter().find(|&&s| s > 1) {
                return Err(BmgfError::Input(format!("segment id {bad} not in {{0, 1}}")));
            }
            let table = g.param(seg);
            let segs = g.gather_rows(table, segment_ids)?;
            x = g.add(x, segs)?;
        }
        Ok(x)
    }

    /// Runs the transformer stack. `pad[t] == true` marks padding: those
    /// positions are never attended to and their output rows are zero.
    pub fn encode(&self, g: &mut Graph, embedded: Var, pad: Option<&[bool]>, ctx: &mut ForwardCtx) -> Result<Var> {
        let rows = g.rows(embedded);
        if g.cols(embedded) != self.config.d_model {
            return Err(BmgfError::dim("encode", format!("width {} vs d_model {}", g.cols(embedded), self.config.d_model)));
        }
        let valid: Option<Vec<bool>> = match pad {
            Some(p) if p.len() != rows => {
                return Err(BmgfError::dim("encode", format!("pad mask of {} for {rows} rows", p.len())));
            }
            Some(p) => Some(p.iter().map(|&b| !b).collect()),
            None => None,
        };
        let mut x = ctx.dropout(g, embedded)?;
        for layer in &self.layers {
            let a = layer.norm1.forward(g, x)?;
            let a = layer.attn.forward(g, a, valid.as_deref(), ctx)?;
            let a = ctx.dropout(g, a)?;
            x = g.add(x, a)?;
            let b = layer.norm2.forward(g, x)?;
            let b = layer.ff_in.forward(g, b)?;
            let b = g.relu(b);
            let b = ctx.dropout(g, b)?;
            let b = layer.ff_out.forward(g, b)?;
            let b = ctx.dropout(g, b)?;
            x = g.add(x, b)?;
        }
        let mut out = self.final_norm.forward(g, x)?;
        if let Some(v) = valid.as_deref() {
            out = g.mask_rows(out, v)?;
        }
        Ok(out)
    }

    /// Splits joint-mode rows at the SEP/SEP boundary.
    pub fn split_args(&self, g: &mut Graph, encoded: Var, pair: &TokenizedPair) -> Result<ContextualizedPair> {
        let rows = g.rows(encoded);
        if pair.m == 0 || pair.n == 0 || rows < pair.len() {
            return Err(BmgfError::Contract(format!(
                "cannot split {rows} rows into arguments of {} and {} tokens",
                pair.m, pair.n
            )));
        }
        let h1 = g.slice_rows(encoded, 0, pair.m + 2)?;
        let h2 = g.slice_rows(encoded, pair.m + 2, pair.n + 2)?;
        Ok(ContextualizedPair { h1, h2 })
    }

    pub fn encode_joint(&self, g: &mut Graph, pair: &TokenizedPair, ctx: &mut ForwardCtx) -> Result<ContextualizedPair> {
        let e = self.embed(g, &pair.token_ids, &pair.segment_ids)?;
        let h = self.encode(g, e, None, ctx)?;
        self.split_args(g, h, pair)
    }

    /// Encodes each argument on its own as `[CLS, tokens, EOS]`, segment 0,
    /// positions restarting at zero.
    pub fn encode_siamese(&self, g: &mut Graph, pair: &TokenizedPair, ctx: &mut ForwardCtx) -> Result<ContextualizedPair> {
        if self.config.mode != EncoderMode::Siamese {
            return Err(BmgfError::Contract("encode_siamese called on a joint-mode encoder".into()));
        }
        let (s1, s2) = pair.siamese_ids();
        let e1 = self.embed(g, &s1, &vec![0; s1.len()])?;
        let h1 = self.encode(g, e1, None, ctx)?;
        let e2 = self.embed(g, &s2, &vec![0; s2.len()])?;
        let h2 = self.encode(g, e2, None, ctx)?;
        Ok(ContextualizedPair { h1, h2 })
    }

    pub fn encode_pair(&self, g: &mut Graph, pair: &TokenizedPair, ctx: &mut ForwardCtx) -> Result<ContextualizedPair> {
        match self.config.mode {
            EncoderMode::Joint => self.encode_joint(g, pair, ctx),
            EncoderMode::Siamese => self.encode_siamese(g, pair, ctx),
        }
    }

    pub fn segment_embedding(&self) -> Option<ParamId> {
        self.segment_embedding
    }

    pub fn token_embedding(&self) -> ParamId {
        self.token_embedding
    }
}

/// Convenience for tests and bindings: encodes and returns both argument
/// matrices as plain tensors.
pub fn encode_to_tensors(encoder: &Encoder, store: &ParamStore, pair: &TokenizedPair) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new(store);
    let ctx_pair = encoder.encode_pair(&mut g, pair, &mut ForwardCtx::eval())?;
    Ok((g.tensor(ctx_pair.h1), g.tensor(ctx_pair.h2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["a b c d e f g h i j k l m n o p q r s t"], 1)
    }

    fn config(vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: 8,
            layers: 2,
            heads: 2,
            ff_dim: 16,
            max_len: 32,
            use_segment_embeddings: true,
            mode: EncoderMode::Joint,
            freeze_encoder: false,
        }
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("Hello, World!  it's"), vec!["hello", ",", "world", "!", "it", "'", "s"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn direct_layout() {
        let v = vocab();
        let p = tokenize_pair("a b", "c", &v, 128).unwrap();
        let (a, b, c) = (v.id("a"), v.id("b"), v.id("c"));
        assert_eq!(p.token_ids, vec![CLS, a, b, SEP, SEP, c, EOS]);
        assert_eq!(p.segment_ids, vec![0, 0, 0, 0, 1, 1, 1]);
        assert_eq!((p.m, p.n), (2, 1));
        assert_eq!(p.arg1_span(), 0..=3);
        assert_eq!(p.arg2_span(), 4..=6);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let p = tokenize_pair("a zzz", "b", &vocab(), 128).unwrap();
        assert_eq!(p.token_ids[2], UNK);
    }

    #[test]
    fn truncation_keeps_layout() {
        let v = vocab();
        let p = tokenize_pair("a b c d e f g h i j", "k l m n o p q r s t", &v, 8).unwrap();
        // budget of 4 argument tokens split 10:10 -> 2 + 2
        assert_eq!((p.m, p.n), (2, 2));
        assert_eq!(p.token_ids, vec![CLS, v.id("a"), v.id("b"), SEP, SEP, v.id("k"), v.id("l"), EOS]);
        assert_eq!(truncate_lengths(1, 10, 4), (1, 3));
        assert_eq!(truncate_lengths(9, 1, 4), (3, 1));
        assert_eq!(truncate_lengths(3, 2, 10), (3, 2));
    }

    #[test]
    fn empty_argument_is_rejected() {
        assert!(matches!(tokenize_pair("  ", "a", &vocab(), 32), Err(BmgfError::Input(_))));
        assert!(matches!(tokenize_pair("a", "", &vocab(), 32), Err(BmgfError::Input(_))));
    }

    #[test]
    fn vocabulary_file_roundtrip() {
        let v = vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(v, back);
        assert_eq!(back.id("<sep>"), SEP);
        assert!(Vocabulary::from_tokens(vec!["x".into()]).is_err());
    }

    #[test]
    fn split_shapes_and_partition() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, config(v.len()), &mut rng).unwrap();
        let pair = tokenize_pair("a b", "c", &v, 32).unwrap();
        let mut g = Graph::new(&store);
        let e = enc.embed(&mut g, &pair.token_ids, &pair.segment_ids).unwrap();
        let h = enc.encode(&mut g, e, None, &mut ForwardCtx::eval()).unwrap();
        let cp = enc.split_args(&mut g, h, &pair).unwrap();
        assert_eq!(g.shape(cp.h1), &[4, 8]);
        assert_eq!(g.shape(cp.h2), &[3, 8]);
        let joined = [g.value(cp.h1), g.value(cp.h2)].concat();
        assert_eq!(joined.as_slice(), g.value(h));
    }

    #[test]
    fn embedding_ablation_and_additivity() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, config(v.len()), &mut rng).unwrap();
        let pair = tokenize_pair("a b", "c d", &v, 32).unwrap();
        let mut flipped = pair.segment_ids.clone();
        flipped[2] = 1;
        let mut g = Graph::new(&store);
        let e0 = enc.embed(&mut g, &pair.token_ids, &pair.segment_ids).unwrap();
        let e1 = enc.embed(&mut g, &pair.token_ids, &flipped).unwrap();
        let seg = store.tensor(enc.segment_embedding().unwrap());
        let d = 8;
        for t in 0..pair.len() {
            for c in 0..d {
                let diff = g.value(e1)[t * d + c] - g.value(e0)[t * d + c];
                let expected = if t == 2 { seg.data()[d + c] - seg.data()[c] } else { 0.0 };
                assert!((diff - expected).abs() < 1e-12);
            }
        }

        let mut cfg = config(v.len());
        cfg.use_segment_embeddings = false;
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, cfg, &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let e0 = enc.embed(&mut g, &pair.token_ids, &pair.segment_ids).unwrap();
        let e1 = enc.embed(&mut g, &pair.token_ids, &flipped).unwrap();
        assert_eq!(g.value(e0), g.value(e1));
    }

    #[test]
    fn zero_tables_give_zero_embedding() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, config(v.len()), &mut rng).unwrap();
        for id in [enc.token_embedding, enc.position_embedding, enc.segment_embedding.unwrap()] {
            store.tensor_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let pair = tokenize_pair("a b", "c", &v, 32).unwrap();
        let mut g = Graph::new(&store);
        let e = enc.embed(&mut g, &pair.token_ids, &pair.segment_ids).unwrap();
        assert!(g.value(e).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn position_overflow_is_an_input_error() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let mut cfg = config(v.len());
        cfg.max_len = 6;
        let enc = Encoder::new(&mut store, cfg, &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let r = enc.embed(&mut g, &[CLS; 7], &[0; 7]);
        assert!(matches!(r, Err(BmgfError::Input(_))));
    }

    #[test]
    fn singleton_attention_weight_is_one() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, config(v.len()), &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let e = enc.embed(&mut g, &[CLS], &[0]).unwrap();
        let (_, weights) = enc.layers[0].attn.forward_with_weights(&mut g, e, None, &mut ForwardCtx::eval()).unwrap();
        for w in weights {
            assert_eq!(g.value(w), &[1.0]);
        }
    }

    #[test]
    fn encode_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, config(30), &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut swapped = rows.clone();
        swapped.swap(1, 3);
        let mut g = Graph::new(&store);
        let x = g.constant(&Tensor::from_rows(&rows).unwrap());
        let y = g.constant(&Tensor::from_rows(&swapped).unwrap());
        let hx = enc.encode(&mut g, x, None, &mut ForwardCtx::eval()).unwrap();
        let hy = enc.encode(&mut g, y, None, &mut ForwardCtx::eval()).unwrap();
        let (a, b) = (g.tensor(hx), g.tensor(hy));
        for (i, j) in [(0, 0), (1, 3), (2, 2), (3, 1), (4, 4)] {
            for (p, q) in a.row(i).iter().zip(b.row(j)) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pad_positions_do_not_leak() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, config(v.len()), &mut rng).unwrap();
        let pair = tokenize_pair("a b", "c", &v, 32).unwrap();
        let (ids, segs, pad) = pair.padded(10);
        let mut other = ids.clone();
        other[8] = v.id("q");
        other[9] = v.id("t");
        let mut g = Graph::new(&store);
        let run = |g: &mut Graph, ids: &[usize]| {
            let e = enc.embed(g, ids, &segs).unwrap();
            enc.encode(g, e, Some(&pad), &mut ForwardCtx::eval()).unwrap()
        };
        let h0 = run(&mut g, &ids);
        let h1 = run(&mut g, &other);
        assert_eq!(g.value(h0), g.value(h1));
        assert!(g.tensor(h0).row(9).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn siamese_shapes_and_independence() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let mut cfg = config(v.len());
        cfg.mode = EncoderMode::Siamese;
        let enc = Encoder::new(&mut store, cfg, &mut rng).unwrap();
        let p1 = tokenize_pair("a b c", "d e", &v, 32).unwrap();
        let p2 = tokenize_pair("a b c", "f g h i", &v, 32).unwrap();
        let (a1, b1) = encode_to_tensors(&enc, &store, &p1).unwrap();
        let (a2, b2) = encode_to_tensors(&enc, &store, &p2).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(a1.shape(), &[5, 8]);
        assert_eq!(b1.shape(), &[4, 8]);
        assert_eq!(b2.shape(), &[6, 8]);

        // same initialization, joint path
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store_j = ParamStore::new();
        let enc_j = Encoder::new(&mut store_j, config(v.len()), &mut rng).unwrap();
        let (j1, _) = encode_to_tensors(&enc_j, &store_j, &p1).unwrap();
        assert_eq!(j1.shape(), a1.shape());
        assert_ne!(j1, a1);
    }

    #[test]
    fn freeze_keeps_only_segment_embedding_trainable() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let mut cfg = config(30);
        cfg.freeze_encoder = true;
        let enc = Encoder::new(&mut store, cfg, &mut rng).unwrap();
        let trainable: Vec<_> = enc.params().into_iter().filter(|&id| store.trainable(id)).collect();
        assert_eq!(trainable, vec![enc.segment_embedding().unwrap()]);
    }
}
