//! Small parameterized building blocks shared by the encoder, the fusion
//! layer and the prediction head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{BmgfError, Result};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Var};

/// Train/eval switch threaded through every forward pass. Dropout is active
/// only when an RNG is supplied.
pub struct ForwardCtx<'r> {
    pub dropout: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> ForwardCtx<'r> {
    pub fn eval() -> Self {
        ForwardCtx { dropout: 0.0, rng: None }
    }

    pub fn train(dropout: f64, rng: &'r mut ChaCha8Rng) -> Self {
        ForwardCtx { dropout, rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => g.dropout(x, self.dropout, rng),
            _ => Ok(x),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let weight = store.add(&format!("{name}.weight"), &[input, output], Init::FanIn(input), true, rng);
        let bias = bias.then(|| store.add(&format!("{name}.bias"), &[output], Init::FanIn(input), false, rng));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        LayerNorm {
            gain: store.add(&format!("{name}.gain"), &[dim], Init::Constant(1.0), false, rng),
            bias: store.add(&format!("{name}.bias"), &[dim], Init::Constant(0.0), false, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, 1e-5)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}

/// Scaled dot-product multi-head self-attention with input and output
/// projections. No residual and no normalization; callers add those.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dim: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(BmgfError::Config(format!("{name}: dimension {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            heads,
            dim,
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, rng),
        })
    }

    /// Self-attention over the rows of `x`. `key_valid[j] == false` removes
    /// row `j` from every query's softmax.
    pub fn forward(&self, g: &mut Graph, x: Var, key_valid: Option<&[bool]>, ctx: &mut ForwardCtx) -> Result<Var> {
        self.forward_with_weights(g, x, key_valid, ctx).map(|(out, _)| out)
    }

    /// Like [`forward`](Self::forward) but also returns the per-head attention matrices.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        x: Var,
        key_valid: Option<&[bool]>,
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, Vec<Var>)> {
        if g.cols(x) != self.dim {
            return Err(BmgfError::dim("multi_head", format!("input width {} vs {}", g.cols(x), self.dim)));
        }
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores, key_valid)?;
            weights.push(attn);
            let attn = ctx.dropout(g, attn)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        Ok((self.output.forward(g, cat)?, weights))
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.output].iter().flat_map(|l| l.params()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn attention_rows_sum_to_one_over_valid_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2, &mut rng).unwrap();
        let x: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new(&store);
        let xv = g.constant(&Tensor::new(vec![4, 8], x).unwrap());
        let valid = [true, true, false, true];
        let (_, weights) = mha.forward_with_weights(&mut g, xv, Some(&valid), &mut ForwardCtx::eval()).unwrap();
        for w in weights {
            let vals = g.value(w);
            for r in 0..4 {
                let row = &vals[r * 4..(r + 1) * 4];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert_eq!(row[2], 0.0);
            }
        }
    }

    #[test]
    fn head_divisibility_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        assert!(matches!(
            MultiHeadAttention::new(&mut store, "mha", 10, 3, &mut rng),
            Err(BmgfError::Config(_))
        ));
    }
}
