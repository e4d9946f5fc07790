//! Gated multi-head self-attention over `[h_i, m_i]` rows, one argument at a time.

use rand::Rng;

use crate::encoder::ContextualizedPair;
use crate::error::{BmgfError, Result};
use crate::layers::{ForwardCtx, MultiHeadAttention};
use crate::matching::MatchVector;
use crate::tensor::{Graph, Init, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionConfig {
    pub heads: usize,
    /// Row width `d_q`: `d + 5l`, or `d` when matching is disabled.
    pub d_q: usize,
    pub enabled: bool,
    /// Also emit the front special-token row (row 0).
    pub include_front_row: bool,
}

/// Fused rows per argument: `(M + 1) x d_q` and `(N + 1) x d_q` by default.
#[derive(Clone, Copy, Debug)]
pub struct FusedSequence {
    pub f1: Var,
    pub f2: Var,
}

#[derive(Clone, Debug)]
pub struct GatedFusion {
    pub config: FusionConfig,
    /// `None` when the fusion layer is switched off.
    pub attention: Option<MultiHeadAttention>,
    pub gate: Option<ParamId>,
}

impl GatedFusion {
    pub fn new<R: Rng>(store: &mut ParamStore, config: FusionConfig, rng: &mut R) -> Result<Self> {
        if !config.enabled {
            return Ok(GatedFusion { config, attention: None, gate: None });
        }
        let attention = MultiHeadAttention::new(store, "fusion.attention", config.d_q, config.heads, rng)?;
        let gate = store.add("fusion.gate", &[2 * config.d_q, 1], Init::FanIn(2 * config.d_q), true, rng);
        Ok(GatedFusion { config, attention: Some(attention), gate: Some(gate) })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = self.attention.as_ref().map(|a| a.params()).unwrap_or_default();
        out.extend(self.gate);
        out
    }

    /// Plain multi-head self-attention `Q' = MultiHead(Q, Q, Q)`.
    pub fn multi_head(&self, g: &mut Graph, q: Var, valid: Option<&[bool]>, ctx: &mut ForwardCtx) -> Result<Var> {
        let attn = self.attention.as_ref().ok_or_else(|| BmgfError::Contract("fusion layer is disabled".into()))?;
        attn.forward(g, q, valid, ctx)
    }

    /// `a * Q' + (1 - a) * Q` with one sigmoid gate per row.
    pub fn gated_multi_head(&self, g: &mut Graph, q: Var, valid: Option<&[bool]>, ctx: &mut ForwardCtx) -> Result<Var> {
        let q_prime = self.multi_head(g, q, valid, ctx)?;
        let gate = self.gate.expect("enabled fusion has a gate");
        gate_rows(g, q, q_prime, gate)
    }

    /// Fuses one argument's `h` and (optional) `m` rows.
    pub fn fuse_one(
        &self,
        g: &mut Graph,
        h: Var,
        m: Option<Var>,
        valid: Option<&[bool]>,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let q = match m {
            Some(m) => {
                if g.rows(m) != g.rows(h) {
                    return Err(BmgfError::Contract(format!(
                        "fusion: {} contextual rows vs {} match rows",
                        g.rows(h),
                        g.rows(m)
                    )));
                }
                g.concat_cols(&[h, m])?
            }
            None => h,
        };
        if g.cols(q) != self.config.d_q {
            return Err(BmgfError::dim("fuse", format!("row width {} vs d_q = {}", g.cols(q), self.config.d_q)));
        }
        let rows = g.rows(q);
        if rows < 2 {
            return Err(BmgfError::Contract("fusion needs at least two rows".into()));
        }
        let out = if self.config.enabled { self.gated_multi_head(g, q, valid, ctx)? } else { q };
        if self.config.include_front_row {
            Ok(out)
        } else {
            g.slice_rows(out, 1, rows - 1)
        }
    }

    pub fn fuse(
        &self,
        g: &mut Graph,
        pair: &ContextualizedPair,
        matches: Option<&MatchVector>,
        ctx: &mut ForwardCtx,
    ) -> Result<FusedSequence> {
        let f1 = self.fuse_one(g, pair.h1, matches.map(|m| m.m1), None, ctx)?;
        let f2 = self.fuse_one(g, pair.h2, matches.map(|m| m.m2), None, ctx)?;
        Ok(FusedSequence { f1, f2 })
    }

    /// Plain-array form of [`fuse_one`](Self::fuse_one) in eval mode.
    pub fn fuse_tensor(&self, store: &ParamStore, h: &Tensor, m: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let hv = g.constant(h);
        let mv = m.map(|t| g.constant(t));
        let out = self.fuse_one(&mut g, hv, mv, None, &mut ForwardCtx::eval())?;
        Ok(g.tensor(out))
    }
}

/// Per-row gate `sigmoid([x, y] W)` mixing `x` towards `y`.
pub fn gate_rows(g: &mut Graph, x: Var, y: Var, w: ParamId) -> Result<Var> {
    let cat = g.concat_cols(&[x, y])?;
    let wv = g.param(w);
    let pre = g.matmul(cat, wv)?;
    let a = g.sigmoid(pre);
    g.gate_mix(x, y, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(d_q: usize, heads: usize, enabled: bool) -> (ParamStore, GatedFusion) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let f = GatedFusion::new(&mut store, FusionConfig { heads, d_q, enabled, include_front_row: false }, &mut rng).unwrap();
        (store, f)
    }

    fn random(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn default_width_is_208() {
        let (store, f) = build(128 + 80, 16, true);
        let h = random(4, 128, 1);
        let m = random(4, 80, 2);
        let out = f.fuse_tensor(&store, &h, Some(&m)).unwrap();
        assert_eq!(out.shape(), &[3, 208]);
    }

    #[test]
    fn disabled_fusion_passes_rows_through() {
        let (store, f) = build(6, 2, false);
        assert!(f.params().is_empty());
        assert_eq!(store.len(), 0);
        let h = random(5, 4, 1);
        let m = random(5, 2, 2);
        let out = f.fuse_tensor(&store, &h, Some(&m)).unwrap();
        for r in 1..5 {
            assert_eq!(&out.row(r - 1)[..4], h.row(r));
            assert_eq!(&out.row(r - 1)[4..], m.row(r));
        }
    }

    #[test]
    fn closed_and_half_open_gates() {
        let (mut store, f) = build(4, 2, true);
        let gate = f.gate.unwrap();
        let q = random(3, 4, 7);
        let q_prime = {
            let mut g = Graph::new(&store);
            let qv = g.constant(&q);
            let y = f.multi_head(&mut g, qv, None, &mut ForwardCtx::eval()).unwrap();
            g.tensor(y)
        };
        store.tensor_mut(gate).data_mut().iter_mut().for_each(|w| *w = 0.0);
        let mut g = Graph::new(&store);
        let qv = g.constant(&q);
        let mid = f.gated_multi_head(&mut g, qv, None, &mut ForwardCtx::eval()).unwrap();
        for (i, v) in g.value(mid).iter().enumerate() {
            assert!((v - 0.5 * (q.data()[i] + q_prime.data()[i])).abs() < 1e-12);
        }

        // a very negative pre-activation shuts the gate: output is Q itself
        let mut closed = store.clone();
        let w = closed.tensor_mut(gate).data_mut();
        w.iter_mut().for_each(|v| *v = 0.0);
        let big = Tensor::new(vec![3, 4], vec![100.0; 12]).unwrap();
        w[0] = -10.0;
        let mut g = Graph::new(&closed);
        let qv = g.constant(&big);
        let out = f.gated_multi_head(&mut g, qv, None, &mut ForwardCtx::eval()).unwrap();
        for v in g.value(out) {
            assert!((v - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn singleton_sequence_attends_to_itself() {
        let (store, f) = build(4, 2, true);
        let attn = f.attention.as_ref().unwrap();
        let q = random(1, 4, 9);
        let mut g = Graph::new(&store);
        let qv = g.constant(&q);
        let out = f.multi_head(&mut g, qv, None, &mut ForwardCtx::eval()).unwrap();
        let v = attn.value.forward(&mut g, qv).unwrap();
        let expect = attn.output.forward(&mut g, v).unwrap();
        for (a, b) in g.value(out).iter().zip(g.value(expect)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_key_content_is_ignored() {
        let (store, f) = build(4, 2, true);
        let q = random(4, 4, 11);
        let mut q2 = q.clone();
        q2.data_mut()[8..12].iter_mut().for_each(|v| *v *= -7.0);
        let valid = [true, true, false, true];
        let run = |t: &Tensor| {
            let mut g = Graph::new(&store);
            let qv = g.constant(t);
            let y = f.multi_head(&mut g, qv, Some(&valid), &mut ForwardCtx::eval()).unwrap();
            g.tensor(y)
        };
        let (a, b) = (run(&q), run(&q2));
        for r in [0, 1, 3] {
            for (x, y) in a.row(r).iter().zip(b.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn not_scale_invariant() {
        let (store, f) = build(4, 2, true);
        let q = random(3, 4, 13);
        let mut q3 = q.clone();
        q3.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        let a = f.fuse_tensor(&store, &q, None).unwrap();
        let b = f.fuse_tensor(&store, &q3, None).unwrap();
        let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (3.0 * x - y).abs()).sum();
        assert!(diff > 1e-3);
        assert!(a.data().iter().zip(b.data()).any(|(x, y)| (x - y).abs() > 1e-3));
    }

    #[test]
    fn row_mismatch_is_contract_error() {
        let (store, f) = build(6, 2, true);
        let r = f.fuse_tensor(&store, &random(4, 4, 1), Some(&random(3, 2, 2)));
        assert!(matches!(r, Err(BmgfError::Contract(_))));
    }

    #[test]
    fn front_row_flag_keeps_all_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = FusionConfig { heads: 2, d_q: 4, enabled: true, include_front_row: true };
        let f = GatedFusion::new(&mut store, cfg, &mut rng).unwrap();
        assert_eq!(f.fuse_tensor(&store, &random(5, 4, 1), None).unwrap().shape(), &[5, 4]);
    }
}
