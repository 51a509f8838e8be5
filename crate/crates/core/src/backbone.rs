//! Shared hop-residual encoder.
//!
//! One MLP `Φ` is applied to every propagated hop matrix `H^k = Ã^k X` and the
//! embedding of a node is the concatenation of `Φ(H^k) − Φ(H^0)` over
//! `k = 1..=k_hops`.

use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{propagate_hops, SparseMatrix};
use crate::nn::{check_chain, Linear, LinearVars};
use crate::tape::{Mat, Tape, Var};
use crate::{Error, Result};

pub const DEFAULT_DEPTH: usize = 4;
pub const DEFAULT_K_HOPS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    pub layers: Vec<Linear>,
    pub k_hops: usize,
}

impl BackboneParams {
    /// `depth` layers `D → D → … → d_out`, tanh between layers.
    pub fn init<R: Rng>(input: usize, output: usize, depth: usize, k_hops: usize, rng: &mut R) -> Self {
        let layers = (0..depth)
            .map(|i| Linear::xavier(input, if i + 1 == depth { output } else { input }, rng))
            .collect();
        Self { layers, k_hops }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Linear::fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::fan_out)
    }

    /// Width of the concatenated residual embedding.
    pub fn embed_dim(&self) -> usize {
        self.k_hops * self.output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("backbone needs at least one layer".into()));
        }
        if self.k_hops == 0 {
            return Err(Error::Config("k_hops must be at least 1".into()));
        }
        check_chain(&self.layers, self.input_dim(), self.output_dim(), "backbone")
    }

    /// Row-wise `Φ`.
    pub fn phi(&self, x: &Mat) -> Mat {
        let last = self.layers.len() - 1;
        let mut y = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            y = l.apply(&y);
            if i < last {
                y.mapv_inplace(f64::tanh);
            }
        }
        y
    }
}

/// Embeds every node of a graph.
pub fn encode(x: &Mat, adj_norm: &SparseMatrix, params: &BackboneParams) -> Result<Mat> {
    params.validate()?;
    if x.ncols() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "features have width {}, backbone expects {}",
            x.ncols(),
            params.input_dim()
        )));
    }
    let hops = propagate_hops(adj_norm, x, params.k_hops)?;
    encode_hops(&hops, params)
}

/// Embeds from precomputed hop matrices `[H^0, …, H^k]` (any row subset).
pub fn encode_hops(hops: &[Mat], params: &BackboneParams) -> Result<Mat> {
    if hops.len() != params.k_hops + 1 {
        return Err(Error::Dimension(format!(
            "{} hop matrices for k_hops = {}",
            hops.len(),
            params.k_hops
        )));
    }
    let base = params.phi(&hops[0]);
    let parts: Vec<Mat> = hops[1..].iter().map(|h| params.phi(h) - &base).collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(1), &views).expect("equal row counts"))
}

pub(crate) struct BackboneVars {
    pub layers: Vec<LinearVars>,
}

impl BackboneVars {
    pub fn new(params: &BackboneParams, tape: &mut Tape) -> Self {
        Self {
            layers: params.layers.iter().map(|l| l.leaves(tape)).collect(),
        }
    }

    fn phi(&self, tape: &mut Tape, x: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut y = x;
        for (i, l) in self.layers.iter().enumerate() {
            y = l.apply(tape, y);
            if i < last {
                y = tape.tanh(y);
            }
        }
        y
    }

    /// Recorded counterpart of [`encode_hops`]; the hop rows are constants.
    pub fn encode(&self, tape: &mut Tape, hops: &[Mat]) -> Var {
        let inputs: Vec<Var> = hops.iter().map(|h| tape.leaf(h.clone())).collect();
        let base = self.phi(tape, inputs[0]);
        let parts: Vec<Var> = inputs[1..]
            .iter()
            .map(|&h| {
                let y = self.phi(tape, h);
                tape.sub(y, base)
            })
            .collect();
        tape.concat_cols(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{sym_norm_adjacency, Graph};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_params(width: usize, k_hops: usize) -> BackboneParams {
        BackboneParams {
            layers: vec![Linear::identity(width)],
            k_hops,
        }
    }

    #[test]
    fn two_node_path_residual() {
        let g = Graph::new(array![[1.0, 0.0], [0.0, 1.0]], vec![(0, 1)], None).unwrap();
        let h = encode(g.raw_features(), &sym_norm_adjacency(&g), &identity_params(2, 1)).unwrap();
        assert_eq!(h, array![[-1.0, 1.0], [1.0, -1.0]]);
    }

    #[test]
    fn fixed_point_gives_zero_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = BackboneParams::init(5, 4, DEFAULT_DEPTH, 2, &mut rng);
        let x = Mat::from_shape_fn((6, 5), |(i, j)| (i * 5 + j) as f64 * 0.1);
        let h = encode(&x, &SparseMatrix::identity(6), &params).unwrap();
        assert_eq!(h.dim(), (6, 8));
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = BackboneParams::init(32, 32, DEFAULT_DEPTH, DEFAULT_K_HOPS, &mut rng);
        let edges: Vec<_> = (0..9).map(|i| (i, i + 1)).collect();
        let g = Graph::new(Mat::ones((10, 32)), edges, None).unwrap();
        let h = encode(g.raw_features(), &sym_norm_adjacency(&g), &params).unwrap();
        assert_eq!(h.dim(), (10, 64));
        assert_eq!(params.embed_dim(), 64);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let params = identity_params(3, 1);
        let err = encode(&Mat::zeros((2, 4)), &SparseMatrix::identity(2), &params).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn recorded_encoder_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = BackboneParams::init(4, 3, 3, 2, &mut rng);
        let hops: Vec<Mat> = (0..3)
            .map(|k| Mat::from_shape_fn((5, 4), |(i, j)| ((i + 2 * j + k) as f64).sin()))
            .collect();
        let plain = encode_hops(&hops, &params).unwrap();
        let mut tape = Tape::new();
        let vars = BackboneVars::new(&params, &mut tape);
        let h = vars.encode(&mut tape, &hops);
        let diff = (tape.value(h) - &plain).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (n, d) in [(3, 2), (6, 4), (8, 6)] {
            let mut params = BackboneParams::init(d, d, 3, 2, &mut rng);
            for l in &mut params.layers {
                l.bias = Mat::from_shape_fn(l.bias.dim(), |(_, j)| 0.1 * j as f64 - 0.2);
            }
            let hops: Vec<Mat> = (0..3)
                .map(|k| Mat::from_shape_fn((n, d), |(i, j)| ((i * d + j + 7 * k) as f64).sin()))
                .collect();
            let w = Mat::from_shape_fn((n, 2 * d), |(i, j)| ((i + j) as f64).cos());
            let loss_of = |p: &BackboneParams| (encode_hops(&hops, p).unwrap() * &w).sum();

            let mut tape = Tape::new();
            let vars = BackboneVars::new(&params, &mut tape);
            let h = vars.encode(&mut tape, &hops);
            let wv = tape.leaf(w.clone());
            let prod = tape.mul(h, wv);
            let loss = tape.sum_all(prod);
            let grads = tape.backward(loss);

            let step = 1e-5;
            let mut worst = 0.0f64;
            for (li, lv) in vars.layers.iter().enumerate() {
                for (which, var) in [(0, lv.weight), (1, lv.bias)] {
                    let shape = if which == 0 { params.layers[li].weight.dim() } else { params.layers[li].bias.dim() };
                    let g = grads.get_or_zeros(var, shape);
                    for ((r, c), &a) in g.indexed_iter() {
                        let bump = |delta: f64| {
                            let mut p = params.clone();
                            let m = if which == 0 { &mut p.layers[li].weight } else { &mut p.layers[li].bias };
                            m[[r, c]] += delta;
                            loss_of(&p)
                        };
                        let fd = (bump(step) - bump(-step)) / (2.0 * step);
                        // the last bias cancels in the residual, leaving FD round-off only
                        let floor = 1e-6 * (1.0 + loss_of(&params).abs());
                        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(floor));
                    }
                }
            }
            assert!(worst <= 1e-4, "N = {n}, D = {d}: relative error {worst}");
        }
    }
}
