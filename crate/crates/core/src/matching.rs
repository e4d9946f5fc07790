//! Bilateral multi-perspective matching between the two argument sequences.
//!
//! Every strategy compares rows through [`Graph::multi_cos`]: row `k` of a
//! perspective matrix scales both vectors elementwise before a cosine. The
//! same five matrices serve both directions (arg1 against arg2 and back).

use rand::Rng;

use crate::encoder::ContextualizedPair;
use crate::error::{BmgfError, Result};
use crate::tensor::{argmax_rows, Graph, Init, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchConfig {
    pub perspectives: usize,
    pub d_model: usize,
}

impl MatchConfig {
    /// Width of the concatenated per-token match vector.
    pub fn width(&self) -> usize {
        5 * self.perspectives
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MatchWeights {
    pub config: MatchConfig,
    pub full_first: ParamId,
    pub full_last: ParamId,
    pub maxpool: ParamId,
    pub attentive: ParamId,
    pub max_attentive: ParamId,
}

impl MatchWeights {
    pub fn new<R: Rng>(store: &mut ParamStore, config: MatchConfig, rng: &mut R) -> Result<Self> {
        if config.perspectives == 0 {
            return Err(BmgfError::Config("matching needs at least one perspective".into()));
        }
        let shape = [config.perspectives, config.d_model];
        let mut add = |name: &str| store.add(&format!("matching.{name}"), &shape, Init::FanIn(config.d_model), true, rng);
        Ok(MatchWeights {
            config,
            full_first: add("full_first"),
            full_last: add("full_last"),
            maxpool: add("maxpool"),
            attentive: add("attentive"),
            max_attentive: add("max_attentive"),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.full_first, self.full_last, self.maxpool, self.attentive, self.max_attentive]
    }
}

/// Perspective matrices as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct PerspectiveVars {
    pub full_first: Var,
    pub full_last: Var,
    pub maxpool: Var,
    pub attentive: Var,
    pub max_attentive: Var,
}

/// Anything that can supply the five perspective matrices to a graph.
pub trait Perspectives {
    fn bind(&self, g: &mut Graph) -> PerspectiveVars;
}

impl Perspectives for MatchWeights {
    fn bind(&self, g: &mut Graph) -> PerspectiveVars {
        PerspectiveVars {
            full_first: g.param(self.full_first),
            full_last: g.param(self.full_last),
            maxpool: g.param(self.maxpool),
            attentive: g.param(self.attentive),
            max_attentive: g.param(self.max_attentive),
        }
    }
}

impl Perspectives for PerspectiveVars {
    fn bind(&self, _: &mut Graph) -> PerspectiveVars {
        *self
    }
}

/// Non-padding positions of each argument. `None` means every row is valid.
#[derive(Clone, Debug, Default)]
pub struct Validity {
    pub arg1: Option<Vec<bool>>,
    pub arg2: Option<Vec<bool>>,
}

impl Validity {
    pub fn all() -> Self {
        Self::default()
    }
}

/// Per-token match rows for both arguments.
#[derive(Clone, Copy, Debug)]
pub struct MatchVector {
    /// `(M + 2) x 5l`
    pub m1: Var,
    /// `(N + 2) x 5l`
    pub m2: Var,
}

fn valid_indices(mask: Option<&[bool]>, rows: usize) -> Vec<usize> {
    (0..rows).filter(|&r| mask.map_or(true, |m| m[r])).collect()
}

fn check_mask(mask: Option<&[bool]>, rows: usize, which: &str) -> Result<()> {
    if let Some(m) = mask {
        if m.len() != rows {
            return Err(BmgfError::dim("matching", format!("{which} mask of {} for {rows} rows", m.len())));
        }
        if !m.iter().any(|&b| b) {
            return Err(BmgfError::Contract(format!("{which} has no valid positions")));
        }
    }
    Ok(())
}

fn zero_padding(g: &mut Graph, x: Var, mask: Option<&[bool]>) -> Result<Var> {
    match mask {
        Some(m) if m.iter().any(|&b| !b) => g.mask_rows(x, m),
        _ => Ok(x),
    }
}

/// `MultiCos` of two single `d`-vectors under an `l x d` perspective matrix.
pub fn multi_cos(g: &mut Graph, v1: Var, v2: Var, w: Var) -> Result<Var> {
    g.multi_cos(v1, v2, w)
}

/// Plain-array form of [`multi_cos`] for vectors.
pub fn multi_cos_values(v1: &[f64], v2: &[f64], w: &Tensor) -> Result<Vec<f64>> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let a = g.constant(&Tensor::new(vec![1, v1.len()], v1.to_vec())?);
    let b = g.constant(&Tensor::new(vec![1, v2.len()], v2.to_vec())?);
    let wv = g.constant(w);
    let c = g.multi_cos(a, b, wv)?;
    Ok(g.value(c).to_vec())
}

struct Prepared {
    n1: usize,
    n2: usize,
}

fn prepare(g: &Graph, pair: &ContextualizedPair, valid: &Validity, w: &PerspectiveVars) -> Result<Prepared> {
    let (n1, n2) = (g.rows(pair.h1), g.rows(pair.h2));
    let d = g.cols(w.maxpool);
    if g.cols(pair.h1) != d || g.cols(pair.h2) != d {
        return Err(BmgfError::dim(
            "matching",
            format!("rows of width {} and {} for d = {d}", g.cols(pair.h1), g.cols(pair.h2)),
        ));
    }
    check_mask(valid.arg1.as_deref(), n1, "arg1")?;
    check_mask(valid.arg2.as_deref(), n2, "arg2")?;
    Ok(Prepared { n1, n2 })
}

/// Each row against the first and last (special-token) rows of the other
/// argument: `[MultiCos(h_i, first; W^f), MultiCos(h_i, last; W^l)]`.
pub fn full_matching(g: &mut Graph, pair: &ContextualizedPair, weights: &(impl Perspectives + ?Sized), valid: &Validity) -> Result<(Var, Var)> {
    let w = weights.bind(g);
    let Prepared { n1, n2 } = prepare(g, pair, valid, &w)?;
    let idx1 = valid_indices(valid.arg1.as_deref(), n1);
    let idx2 = valid_indices(valid.arg2.as_deref(), n2);
    if idx1.len() < 2 || idx2.len() < 2 {
        return Err(BmgfError::Contract("full matching needs at least two rows per argument".into()));
    }
    let (first1, last1) = (idx1[0], *idx1.last().unwrap());
    let (first2, last2) = (idx2[0], *idx2.last().unwrap());
    let (wf, wl) = (w.full_first, w.full_last);

    let a = g.gather_rows(pair.h2, &vec![first2; n1])?;
    let b = g.gather_rows(pair.h2, &vec![last2; n1])?;
    let f = g.multi_cos(pair.h1, a, wf)?;
    let l = g.multi_cos(pair.h1, b, wl)?;
    let m1 = g.concat_cols(&[f, l])?;

    let a = g.gather_rows(pair.h1, &vec![first1; n2])?;
    let b = g.gather_rows(pair.h1, &vec![last1; n2])?;
    let f = g.multi_cos(a, pair.h2, wf)?;
    let l = g.multi_cos(b, pair.h2, wl)?;
    let m2 = g.concat_cols(&[f, l])?;

    Ok((zero_padding(g, m1, valid.arg1.as_deref())?, zero_padding(g, m2, valid.arg2.as_deref())?))
}

/// Elementwise maximum of `MultiCos(h_i, h_j; W)` over the valid rows of
/// the other argument.
pub fn maxpooling_matching(g: &mut Graph, pair: &ContextualizedPair, weights: &(impl Perspectives + ?Sized), valid: &Validity) -> Result<(Var, Var)> {
    let w = weights.bind(g);
    let Prepared { n1, n2 } = prepare(g, pair, valid, &w)?;
    let l = g.rows(w.maxpool);
    let rep: Vec<usize> = (0..n1).flat_map(|i| std::iter::repeat(i).take(n2)).collect();
    let tile: Vec<usize> = (0..n1).flat_map(|_| 0..n2).collect();
    let a = g.gather_rows(pair.h1, &rep)?;
    let b = g.gather_rows(pair.h2, &tile)?;
    let all = g.multi_cos(a, b, w.maxpool)?;
    let all = g.reshape(all, &[n1, n2, l])?;
    let m1 = g.max_axis(all, 1, valid.arg2.as_deref())?;
    let m2 = g.max_axis(all, 0, valid.arg1.as_deref())?;
    Ok((zero_padding(g, m1, valid.arg1.as_deref())?, zero_padding(g, m2, valid.arg2.as_deref())?))
}

/// Matches each row against the cosine-weighted mean of the other argument.
/// Rows whose cosine weights sum to (nearly) zero use the plain mean.
pub fn attentive_matching(g: &mut Graph, pair: &ContextualizedPair, weights: &(impl Perspectives + ?Sized), valid: &Validity) -> Result<(Var, Var)> {
    let w = weights.bind(g);
    prepare(g, pair, valid, &w)?;
    let c = g.pairwise_cos(pair.h1, pair.h2)?;
    let w = w.attentive;

    let alpha = g.normalize_rows(c, valid.arg2.as_deref(), ATTENTIVE_EPS)?;
    let mean2 = g.matmul(alpha, pair.h2)?;
    let m1 = g.multi_cos(pair.h1, mean2, w)?;

    let ct = g.transpose(c)?;
    let beta = g.normalize_rows(ct, valid.arg1.as_deref(), ATTENTIVE_EPS)?;
    let mean1 = g.matmul(beta, pair.h1)?;
    let m2 = g.multi_cos(pair.h2, mean1, w)?;

    Ok((zero_padding(g, m1, valid.arg1.as_deref())?, zero_padding(g, m2, valid.arg2.as_deref())?))
}

/// Threshold below which an attentive denominator counts as zero.
pub const ATTENTIVE_EPS: f64 = 1e-8;

/// Matches each row against the single most cosine-similar row of the other
/// argument (ties go to the smallest index).
pub fn max_attentive_matching(g: &mut Graph, pair: &ContextualizedPair, weights: &(impl Perspectives + ?Sized), valid: &Validity) -> Result<(Var, Var)> {
    let w = weights.bind(g);
    let Prepared { n1, n2 } = prepare(g, pair, valid, &w)?;
    let c = g.pairwise_cos(pair.h1, pair.h2)?;
    let cv = g.value(c).to_vec();
    let best2 = argmax_rows(&cv, n1, n2, valid.arg2.as_deref());
    let mut ct = vec![0.0; n1 * n2];
    for i in 0..n1 {
        for j in 0..n2 {
            ct[j * n1 + i] = cv[i * n2 + j];
        }
    }
    let best1 = argmax_rows(&ct, n2, n1, valid.arg1.as_deref());

    let w = w.max_attentive;
    let pick2 = g.gather_rows(pair.h2, &best2)?;
    let m1 = g.multi_cos(pair.h1, pick2, w)?;
    let pick1 = g.gather_rows(pair.h1, &best1)?;
    let m2 = g.multi_cos(pair.h2, pick1, w)?;
    Ok((zero_padding(g, m1, valid.arg1.as_deref())?, zero_padding(g, m2, valid.arg2.as_deref())?))
}

/// Concatenates `[full (2l), maxpool (l), attentive (l), max-attentive (l)]`
/// per token.
pub fn bilateral_match(
    g: &mut Graph,
    pair: &ContextualizedPair,
    weights: &(impl Perspectives + ?Sized),
    valid: &Validity,
) -> Result<MatchVector> {
    let w = weights.bind(g);
    let (f1, f2) = full_matching(g, pair, &w, valid)?;
    let (p1, p2) = maxpooling_matching(g, pair, &w, valid)?;
    let (a1, a2) = attentive_matching(g, pair, &w, valid)?;
    let (x1, x2) = max_attentive_matching(g, pair, &w, valid)?;
    Ok(MatchVector { m1: g.concat_cols(&[f1, p1, a1, x1])?, m2: g.concat_cols(&[f2, p2, a2, x2])? })
}

/// Plain-array form of [`bilateral_match`].
pub fn bilateral_match_tensors(store: &ParamStore, weights: &MatchWeights, h1: &Tensor, h2: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new(store);
    let pair = ContextualizedPair { h1: g.constant(h1), h2: g.constant(h2) };
    let mv = bilateral_match(&mut g, &pair, weights, &Validity::all())?;
    Ok((g.tensor(mv.m1), g.tensor(mv.m2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(l: usize, d: usize, seed: u64) -> (ParamStore, MatchWeights) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = MatchWeights::new(&mut store, MatchConfig { perspectives: l, d_model: d }, &mut rng).unwrap();
        (store, w)
    }

    fn random_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn multi_cos_basic_cases() {
        let ones = Tensor::new(vec![3, 2], vec![1.0; 6]).unwrap();
        let same = multi_cos_values(&[0.3, -2.0], &[0.3, -2.0], &ones).unwrap();
        assert!(same.iter().all(|c| (c - 1.0).abs() < 1e-12));
        let ortho = multi_cos_values(&[1.0, 0.0], &[0.0, 1.0], &ones).unwrap();
        assert!(ortho.iter().all(|&c| c == 0.0));
        let zero = multi_cos_values(&[0.0, 0.0], &[1.0, 1.0], &ones).unwrap();
        assert!(zero.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn multi_cos_scaled_vectors() {
        // W = [[1,2],[3,1]], v1 = (1,1), v2 = (1,-1):
        // k=0: (1,2) vs (1,-2) -> (1-4)/5 = -0.6
        // k=1: (3,1) vs (3,-1) -> (9-1)/10 = 0.8
        let w = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap();
        let c = multi_cos_values(&[1.0, 1.0], &[1.0, -1.0], &w).unwrap();
        assert!((c[0] + 0.6).abs() < 1e-12);
        assert!((c[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn widths_are_5l_and_2l() {
        let (store, w) = setup(16, 6, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h1, h2) = (random_rows(5, 6, &mut rng), random_rows(3, 6, &mut rng));
        let mut g = Graph::new(&store);
        let pair = ContextualizedPair { h1: g.constant(&h1), h2: g.constant(&h2) };
        let (f1, f2) = full_matching(&mut g, &pair, &w, &Validity::all()).unwrap();
        assert_eq!(g.shape(f1), &[5, 32]);
        assert_eq!(g.shape(f2), &[3, 32]);
        let mv = bilateral_match(&mut g, &pair, &w, &Validity::all()).unwrap();
        assert_eq!(g.shape(mv.m1), &[5, 80]);
        assert_eq!(g.shape(mv.m2), &[3, 80]);
        let full_cols = g.slice_cols(mv.m1, 0, 32).unwrap();
        assert_eq!(g.value(full_cols), g.value(f1));
    }

    #[test]
    fn full_matching_reduces_to_plain_cosine() {
        let (mut store, w) = setup(1, 3, 3);
        for id in [w.full_first, w.full_last] {
            store.tensor_mut(id).data_mut().iter_mut().for_each(|x| *x = 1.0);
        }
        let h1 = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![1.0, 1.0, 0.0]]).unwrap();
        let h2 = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 5.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let mut g = Graph::new(&store);
        let pair = ContextualizedPair { h1: g.constant(&h1), h2: g.constant(&h2) };
        let (m1, _) = full_matching(&mut g, &pair, &w, &Validity::all()).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let expected = [1.0, 0.0, r, r];
        for (a, b) in g.value(m1).iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_matching_ignores_interior_rows_of_other_argument() {
        let (store, w) = setup(2, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h1 = random_rows(3, 4, &mut rng);
        let h2 = random_rows(7, 4, &mut rng);
        let mut h2b = h2.clone();
        h2b.data_mut()[5 * 4..6 * 4].iter_mut().for_each(|x| *x += 3.0);
        let (a, _) = {
            let mut g = Graph::new(&store);
            let pair = ContextualizedPair { h1: g.constant(&h1), h2: g.constant(&h2) };
            let (m1, m2) = full_matching(&mut g, &pair, &w, &Validity::all()).unwrap();
            (g.tensor(m1), g.tensor(m2))
        };
        let mut g = Graph::new(&store);
        let pair = ContextualizedPair { h1: g.constant(&h1), h2: g.constant(&h2b) };
        let (b, _) = full_matching(&mut g, &pair, &w, &Validity::all()).unwrap();
        assert_eq!(a.data(), g.value(b));
    }

    #[test]
    fn full_matching_needs_two_rows() {
        let (store, w) = setup(2, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new(&store);
        let pair = ContextualizedPair { h1: g.constant(&random_rows(1, 4, &mut rng)), h2: g.constant(&random_rows(3, 4, &mut rng)) };
        assert!(matches!(full_matching(&mut g, &pair, &w, &Validity::all()), Err(BmgfError::Contract(_))));
    }

    #[test]
    fn max_attentive_picks_parallel_row_and_first_tie() {
        let (store, w) = setup(2, 2, 7);
        let h1 = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 0.0]]).unwrap();
        // rows 1 and 2 are both parallel to h1[0]; row 1 must win
        let h2 = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]]).unwrap();
        let mut g = Graph::new(&store);
        let pair = ContextualizedPair { h1: g.constant(&h1), h2: g.constant(&h2) };
        let (m1, _) = max_attentive_matching(&mut g, &pair, &w, &Validity::all()).unwrap();
        let wt = store.tensor(w.max_attentive).clone();
        let expect = multi_cos_values(&[1.0, 1.0], &[2.0, 2.0], &wt).unwrap();
        for (a, b) in g.value(m1)[..2].iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(argmax_rows(&[0.5, 0.9, 0.9], 1, 3, None), vec![1]);
    }

    #[test]
    fn singleton_other_argument_collapses_attention() {
        let (store, w) = setup(3, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h1 = random_rows(4, 4, &mut rng);
        let v = random_rows(1, 4, &mut rng);
        let mut g = Graph::new(&store);
        let pair = ContextualizedPair { h1: g.constant(&h1), h2: g.constant(&v) };
        let (a1, _) = attentive_matching(&mut g, &pair, &w, &Validity::all()).unwrap();
        let (x1, _) = max_attentive_matching(&mut g, &pair, &w, &Validity::all()).unwrap();
        let wa = store.tensor(w.attentive).clone();
        let wx = store.tensor(w.max_attentive).clone();
        for i in 0..4 {
            let ea = multi_cos_values(h1.row(i), v.row(0), &wa).unwrap();
            let ex = multi_cos_values(h1.row(i), v.row(0), &wx).unwrap();
            for k in 0..3 {
                assert!((g.value(a1)[i * 3 + k] - ea[k]).abs() < 1e-12);
                assert!((g.value(x1)[i * 3 + k] - ex[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padded_rows_emit_zero_and_are_excluded() {
        let (store, w) = setup(2, 3, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h1 = random_rows(3, 3, &mut rng);
        let h2 = random_rows(4, 3, &mut rng);
        let mut h2_pad = Tensor::zeros(&[6, 3]);
        h2_pad.data_mut()[..12].copy_from_slice(h2.data());
        h2_pad.data_mut()[12..].iter_mut().for_each(|x| *x = 9.0);
        let valid = Validity { arg1: None, arg2: Some(vec![true, true, true, true, false, false]) };

        let mut g = Graph::new(&store);
        let pair = ContextualizedPair { h1: g.constant(&h1), h2: g.constant(&h2) };
        let plain = bilateral_match(&mut g, &pair, &w, &Validity::all()).unwrap();
        let padded_pair = ContextualizedPair { h1: g.constant(&h1), h2: g.constant(&h2_pad) };
        let padded = bilateral_match(&mut g, &padded_pair, &w, &valid).unwrap();
        for (a, b) in g.value(plain.m1).iter().zip(g.value(padded.m1)) {
            assert!((a - b).abs() < 1e-12);
        }
        let m2 = g.tensor(padded.m2);
        assert!(m2.row(4).iter().chain(m2.row(5)).all(|&x| x == 0.0));
        for (a, b) in g.value(plain.m2).iter().zip(&m2.data()[..40]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
