//! Objectives, optimizer and training loop.
//!
//! A batch is a subset of one source graph's nodes. Hop matrices are
//! precomputed per graph; structure and contrastive terms only look at pairs
//! inside the batch. All randomness comes from one seeded ChaCha stream, so a
//! run is a pure function of its inputs and seed.

use std::collections::HashMap;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::align_features;
use crate::experts::curvature_of;
use crate::graph::{propagate_hops, sym_norm_adjacency, Graph};
use crate::model::{ModelState, ModelVars};
use crate::nn::mat_list;
use crate::router::{routing_logits_tape, top_k, top_k_mask, update_banks};
use crate::tape::{ContrastAnchor, ContrastPlan, Mat, PairTerms, Tape, Var};
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const TERM_NAMES: [&str; 5] = ["L_embed", "L_feat", "L_struct", "L_con", "L_gate"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructMode {
    /// Full below `sampled_threshold` nodes, sampled above.
    Auto,
    Full,
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambdas: [f64; 5],
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub contrast_temperature: f64,
    pub negative_samples: usize,
    pub struct_mode: StructMode,
    pub sampled_threshold: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambdas: [1.0, 0.5, 0.1, 0.1, 0.01],
            learning_rate: 5e-5,
            weight_decay: 5e-5,
            epochs: 40,
            batch_size: 512,
            contrast_temperature: 0.5,
            negative_samples: 256,
            struct_mode: StructMode::Auto,
            sampled_threshold: 2000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("loss weights must be ≥ 0, got {:?}", self.lambdas)));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate must be > 0 and weight_decay ≥ 0".into()));
        }
        if !(self.contrast_temperature > 0.0) {
            return Err(Error::Config("contrast_temperature must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be ≥ 2, got {}", self.batch_size)));
        }
        Ok(())
    }

    fn sampled_for(&self, num_nodes: usize) -> bool {
        match self.struct_mode {
            StructMode::Auto => num_nodes > self.sampled_threshold,
            StructMode::Full => false,
            StructMode::Sampled => true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    #[serde(with = "mat_list")]
    pub m: Vec<Mat>,
    #[serde(with = "mat_list")]
    pub v: Vec<Mat>,
}

impl AdamState {
    pub fn zeros_like(params: &[Mat]) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|p| Mat::zeros(p.dim())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update with `weight_decay·θ` added to the gradient.
pub fn adam_step(params: &mut [Mat], grads: &[Mat], state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    let shapes_ok = params.len() == grads.len()
        && params.len() == state.m.len()
        && params.len() == state.v.len()
        && params.iter().zip(grads).all(|(p, g)| p.dim() == g.dim());
    if !shapes_ok {
        return Err(Error::Dimension("optimizer state does not match the parameters".into()));
    }
    if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            let g = g + weight_decay * *p;
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub embed: f64,
    pub feat: f64,
    pub structure: f64,
    pub contrast: f64,
    pub gate: f64,
}

impl LossTerms {
    pub fn as_array(&self) -> [f64; 5] {
        [self.embed, self.feat, self.structure, self.contrast, self.gate]
    }
}

pub fn total_loss(terms: &LossTerms, lambdas: &[f64; 5]) -> f64 {
    terms.as_array().iter().zip(lambdas).map(|(t, l)| t * l).sum()
}

/// Per-graph inputs that do not depend on parameters.
#[derive(Clone, Debug)]
pub struct GraphData {
    pub graph: Graph,
    pub features: Mat,
    pub hops: Vec<Mat>,
}

impl GraphData {
    /// Aligns `graph` and propagates its features.
    pub fn prepare(graph: &Graph, state: &ModelState) -> Result<Self> {
        let aligned = align_features(graph, &state.align)?;
        Self::new(graph, aligned.matrix, state.backbone.k_hops)
    }

    /// Uses already aligned `features`.
    pub fn new(graph: &Graph, features: Mat, k_hops: usize) -> Result<Self> {
        if features.nrows() != graph.num_nodes() {
            return Err(Error::Dimension(format!(
                "{} feature rows for {} nodes",
                features.nrows(),
                graph.num_nodes()
            )));
        }
        let adj = sym_norm_adjacency(graph);
        let hops = propagate_hops(&adj, &features, k_hops)?;
        Ok(Self {
            graph: graph.clone(),
            features,
            hops,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }
}

#[derive(Clone, Debug)]
pub enum StructTarget {
    Full(Mat),
    Sampled(PairTerms),
}

/// Everything random about one batch, fixed before the forward pass.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub nodes: Vec<usize>,
    pub structure: StructTarget,
    pub contrast: ContrastPlan,
}

pub fn plan_batch<R: Rng>(data: &GraphData, nodes: &[usize], cfg: &TrainConfig, rng: &mut R) -> BatchPlan {
    let g = &data.graph;
    let b = nodes.len();
    let pos: HashMap<usize, usize> = nodes.iter().enumerate().map(|(p, &v)| (v, p)).collect();
    let in_batch: Vec<Vec<usize>> = nodes
        .iter()
        .map(|&v| g.neighbors(v).iter().filter_map(|u| pos.get(u).copied()).collect())
        .collect();

    let structure = if cfg.sampled_for(g.num_nodes()) {
        let mut terms = PairTerms {
            normalizer: (b * b) as f64,
            ..PairTerms::default()
        };
        for (p, nbrs) in in_batch.iter().enumerate() {
            for &q in nbrs {
                terms.pairs.push((p, q));
                terms.targets.push(1.0);
                terms.weights.push(1.0);
            }
        }
        let n_pos = terms.pairs.len();
        let n_neg = b * b - n_pos;
        let samples = n_pos.max(1);
        // uniform over non-edge entries, reweighted so the expectation is the
        // full-matrix mean
        let weight = n_neg as f64 / samples as f64;
        let mut drawn = 0;
        while drawn < samples && n_neg > 0 {
            let (p, q) = (rng.random_range(0..b), rng.random_range(0..b));
            if p != q && g.has_edge(nodes[p], nodes[q]) {
                continue;
            }
            terms.pairs.push((p, q));
            terms.targets.push(0.0);
            terms.weights.push(weight);
            drawn += 1;
        }
        StructTarget::Sampled(terms)
    } else {
        let mut a = Mat::zeros((b, b));
        for (p, nbrs) in in_batch.iter().enumerate() {
            for &q in nbrs {
                a[[p, q]] = 1.0;
            }
        }
        StructTarget::Full(a)
    };

    let mut anchors = Vec::new();
    let mut blocked = vec![false; b];
    for (p, nbrs) in in_batch.iter().enumerate() {
        if nbrs.is_empty() {
            continue;
        }
        blocked[p] = true;
        for &q in nbrs {
            blocked[q] = true;
        }
        let pool: Vec<usize> = (0..b).filter(|&q| !blocked[q]).collect();
        blocked[p] = false;
        for &q in nbrs {
            blocked[q] = false;
        }
        let negatives: Vec<usize> = if pool.len() <= cfg.negative_samples {
            pool
        } else {
            let mut idx: Vec<usize> = rand::seq::index::sample(rng, pool.len(), cfg.negative_samples).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| pool[i]).collect()
        };
        let mut denominator = nbrs.clone();
        denominator.extend(negatives);
        anchors.push(ContrastAnchor {
            node: p,
            positives: nbrs.clone(),
            denominator,
        });
    }

    BatchPlan {
        nodes: nodes.to_vec(),
        structure,
        contrast: ContrastPlan { anchors },
    }
}

/// Result of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub terms: LossTerms,
    pub total: f64,
    /// Gradients in [`ModelState::param_values`] order; empty unless requested.
    pub grads: Vec<Mat>,
    pub embeddings: Mat,
    pub reconstructions: Mat,
    pub logits: Mat,
    /// Squared reconstruction error of every expert on every batch node.
    pub expert_errors: Mat,
    pub active: Vec<Vec<usize>>,
}

fn select_rows(m: &Mat, rows: &[usize]) -> Mat {
    m.select(Axis(0), rows)
}

/// Loss terms and intermediates for one batch, with gradients if asked.
pub fn evaluate(state: &ModelState, data: &GraphData, plan: &BatchPlan, with_grads: bool) -> Result<BatchOutput> {
    if plan.nodes.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if data.features.ncols() != state.feature_dim() {
        return Err(Error::Dimension(format!(
            "aligned width {} does not match the model's {}",
            data.features.ncols(),
            state.feature_dim()
        )));
    }
    let mut tape = Tape::new();
    let vars = ModelVars::new(state, &mut tape);
    let hops: Vec<Mat> = data.hops.iter().map(|h| select_rows(h, &plan.nodes)).collect();
    let h = vars.backbone.encode(&mut tape, &hops);

    let scales: Vec<Option<Var>> = vars.experts.iter().map(|e| e.scale(&mut tape)).collect();
    let logits = routing_logits_tape(
        &mut tape,
        h,
        &state.banks,
        &vars.experts,
        &scales,
        state.router.squared_routing,
    );
    let tau = state.router.temperature;
    let full_gate = tape.softmax_rows(logits, tau, None);
    let mask = top_k_mask(tape.value(logits), state.router.top_k);
    let weights = tape.softmax_rows(logits, tau, Some(mask));

    let outputs: Vec<Var> = vars
        .experts
        .iter()
        .zip(&scales)
        .map(|(e, &s)| e.forward(&mut tape, h, s))
        .collect();
    let weighted: Vec<(Var, f64)> = outputs
        .iter()
        .enumerate()
        .map(|(i, &o)| (tape.row_scale(o, weights, i), 1.0))
        .collect();
    let h_hat = tape.weighted_sum(&weighted);

    let l_embed = tape.mse_rows(h, h_hat);
    let x_hat = vars.decoder.apply(&mut tape, h_hat);
    let x = tape.leaf(hops[0].clone());
    let l_feat = tape.mse_rows(x_hat, x);
    let l_struct = match &plan.structure {
        StructTarget::Full(a) => {
            let s = tape.matmul_t(h_hat, h_hat);
            tape.bce_logits_mean(s, a.clone())
        }
        StructTarget::Sampled(terms) => tape.pair_bce(h_hat, terms.clone()),
    };
    let z = tape.normalize_rows(h);
    let l_con = tape.info_nce(z, plan.contrast.clone(), state.train.contrast_temperature);
    let l_gate = tape.neg_entropy_mean(full_gate);

    let term_vars = [l_embed, l_feat, l_struct, l_con, l_gate];
    for (v, name) in term_vars.iter().zip(TERM_NAMES) {
        if !tape.scalar_value(*v).is_finite() {
            return Err(Error::Numeric(format!("{name} is not finite")));
        }
    }
    let lambdas = state.train.lambdas;
    let weighted_terms: Vec<(Var, f64)> = term_vars.iter().copied().zip(lambdas).collect();
    let total = tape.weighted_sum(&weighted_terms);

    let terms = LossTerms {
        embed: tape.scalar_value(l_embed),
        feat: tape.scalar_value(l_feat),
        structure: tape.scalar_value(l_struct),
        contrast: tape.scalar_value(l_con),
        gate: tape.scalar_value(l_gate),
    };
    let grads = if with_grads {
        let g = tape.backward(total);
        vars.params()
            .into_iter()
            .map(|v| g.get_or_zeros(v, tape.value(v).dim()))
            .collect()
    } else {
        Vec::new()
    };

    let embeddings = tape.value(h).clone();
    let b = embeddings.nrows();
    let mut expert_errors = Mat::zeros((b, outputs.len()));
    for (i, &o) in outputs.iter().enumerate() {
        let diff = tape.value(o) - &embeddings;
        for (r, row) in diff.rows().into_iter().enumerate() {
            expert_errors[[r, i]] = row.dot(&row);
        }
    }
    let logit_values = tape.value(logits).clone();
    let active = logit_values
        .rows()
        .into_iter()
        .map(|r| top_k(&r.to_vec(), state.router.top_k))
        .collect();
    Ok(BatchOutput {
        terms,
        total: tape.scalar_value(total),
        grads,
        reconstructions: tape.value(h_hat).clone(),
        embeddings,
        logits: logit_values,
        expert_errors,
        active,
    })
}

/// Shuffled node batches; a trailing batch smaller than 2 joins the previous one.
pub fn make_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub graph: usize,
    pub batch: usize,
    #[serde(rename = "L_embed")]
    pub l_embed: f64,
    #[serde(rename = "L_feat")]
    pub l_feat: f64,
    #[serde(rename = "L_struct")]
    pub l_struct: f64,
    #[serde(rename = "L_con")]
    pub l_con: f64,
    #[serde(rename = "L_gate")]
    pub l_gate: f64,
    pub total: f64,
    pub bank_sizes: Vec<usize>,
}

fn check_signs(state: &ModelState) -> Result<()> {
    for e in &state.experts {
        let k = curvature_of(e);
        if k.signum() != e.kappa_init.signum() || (e.kappa_init == 0.0) != (k == 0.0) {
            return Err(Error::Numeric(format!("expert {} changed curvature sign", e.index)));
        }
    }
    Ok(())
}

/// Runs the configured number of epochs over `sources`, calling `on_batch`
/// after every optimizer step and bank update.
pub fn train(
    sources: &[Graph],
    mut state: ModelState,
    mut on_batch: impl FnMut(&BatchRecord) -> Result<()>,
) -> Result<ModelState> {
    if sources.is_empty() {
        return Err(Error::Data("training needs at least one source graph".into()));
    }
    state.validate()?;
    let data: Vec<GraphData> = sources
        .iter()
        .map(|g| GraphData::prepare(g, &state))
        .collect::<Result<_>>()?;
    if let Some(small) = data.iter().position(|d| d.num_nodes() < 2) {
        return Err(Error::Data(format!("source graph {small} has fewer than 2 nodes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(state.train.seed);
    rng.set_stream(1);
    let cfg = state.train.clone();
    for epoch in 0..cfg.epochs {
        for (gi, d) in data.iter().enumerate() {
            for (bi, nodes) in make_batches(d.num_nodes(), cfg.batch_size, &mut rng).iter().enumerate() {
                let plan = plan_batch(d, nodes, &cfg, &mut rng);
                let out = evaluate(&state, d, &plan, true)
                    .map_err(|e| locate(e, epoch, gi, bi))?;
                if !out.total.is_finite() {
                    return Err(locate(Error::Numeric("total loss is not finite".into()), epoch, gi, bi));
                }
                let mut params = state.param_values();
                adam_step(&mut params, &out.grads, &mut state.optimizer, cfg.learning_rate, cfg.weight_decay)
                    .map_err(|e| locate(e, epoch, gi, bi))?;
                state.set_param_values(&params)?;
                check_signs(&state)?;
                update_banks(
                    &mut state.banks,
                    &out.embeddings,
                    &out.active,
                    &out.expert_errors,
                    epoch,
                    &state.router,
                );
                on_batch(&BatchRecord {
                    epoch,
                    graph: gi,
                    batch: bi,
                    l_embed: out.terms.embed,
                    l_feat: out.terms.feat,
                    l_struct: out.terms.structure,
                    l_con: out.terms.contrast,
                    l_gate: out.terms.gate,
                    total: out.total,
                    bank_sizes: state.banks.iter().map(|b| b.len()).collect(),
                })?;
            }
        }
    }
    Ok(state)
}

fn locate(e: Error, epoch: usize, graph: usize, batch: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, graph {graph}, batch {batch}: {m}")),
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradGroup {
    pub name: String,
    pub max_rel_error: f64,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub groups: Vec<GradGroup>,
    pub max_rel_error: f64,
}

/// Compares analytic gradients of the total loss with central differences.
pub fn grad_check(state: &ModelState, data: &GraphData, plan: &BatchPlan, step: f64) -> Result<GradReport> {
    grad_check_scaled(state, data, plan, step, 1.0)
}

/// [`grad_check`] with the analytic gradient multiplied by `corruption`, to
/// confirm the check notices wrong gradients.
pub fn grad_check_scaled(
    state: &ModelState,
    data: &GraphData,
    plan: &BatchPlan,
    step: f64,
    corruption: f64,
) -> Result<GradReport> {
    let reference = evaluate(state, data, plan, true)?;
    let analytic = reference.grads;
    // central differences carry rounding noise of order ε·|L|/step
    let noise_floor = 1e-6 * (1.0 + reference.total.abs());
    let names = state.param_names();
    let base = state.param_values();
    let mut probe = state.clone();
    let mut loss_at = |values: &[Mat]| -> Result<f64> {
        probe.set_param_values(values)?;
        Ok(evaluate(&probe, data, plan, false)?.total)
    };
    let mut groups = Vec::with_capacity(base.len());
    for (k, (name, p)) in names.into_iter().zip(&base).enumerate() {
        let mut fd = Mat::zeros(p.dim());
        for idx in 0..p.len() {
            let (r, c) = (idx / p.ncols(), idx % p.ncols());
            let mut values = base.clone();
            values[k][[r, c]] = p[[r, c]] + step;
            let plus = loss_at(&values)?;
            values[k][[r, c]] = p[[r, c]] - step;
            let minus = loss_at(&values)?;
            fd[[r, c]] = (plus - minus) / (2.0 * step);
        }
        let a = &analytic[k] * corruption;
        let scale = a.iter().chain(fd.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
        let floor = (1e-3 * scale).max(noise_floor);
        let max_rel_error = a
            .iter()
            .zip(fd.iter())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
            .fold(0.0, f64::max);
        groups.push(GradGroup {
            name,
            max_rel_error,
            size: p.len(),
        });
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradReport { groups, max_rel_error })
}
