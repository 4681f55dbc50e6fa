//! Convolutional mixture-of-experts layer with one expert per demographic group.
//!
//! A [`MoEConvLayer`] holds `m` expert convolutions of identical shape and a
//! small router (1x1 conv, relu, global average pool, dense to `m` logits).
//! The router's softmax scores `s_k(x)` are reweighted by the inverse group
//! sizes `alpha_k = 1 / N_k` and renormalized into selection probabilities
//! `P(E_k | x) = alpha_k s_k / sum_j alpha_j s_j`; a single expert is then
//! picked per sample, either by sampling from those probabilities or by
//! argmax. Because that pick is discrete, the router only learns through
//! objectives built on the probabilities themselves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{ParamSet, Tensor};

/// Group sizes `N_k` with derived priors and balance weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupStats {
    sizes: Vec<u64>,
}

impl GroupStats {
    pub fn new(sizes: Vec<u64>) -> Result<Self> {
        if sizes.is_empty() {
            return invalid("GroupStats", "at least one group is required");
        }
        if let Some(k) = sizes.iter().position(|&n| n == 0) {
            return invalid("GroupStats", format!("group {k} is empty"));
        }
        Ok(Self { sizes })
    }

    /// Counts labels in `[0, m)`.
    pub fn from_labels(labels: impl IntoIterator<Item = usize>, m: usize) -> Result<Self> {
        let mut sizes = vec![0u64; m];
        for c in labels {
            if c >= m {
                return invalid("GroupStats", format!("group label {c} outside [0, {m})"));
            }
            sizes[c] += 1;
        }
        Self::new(sizes)
    }

    pub fn sizes(&self) -> &[u64] {
        &self.sizes
    }

    pub fn groups(&self) -> usize {
        self.sizes.len()
    }

    pub fn total(&self) -> u64 {
        self.sizes.iter().sum()
    }

    /// `P(C_k) = N_k / sum N`.
    pub fn priors(&self) -> Vec<f64> {
        let total = self.total() as f64;
        self.sizes.iter().map(|&n| n as f64 / total).collect()
    }

    /// `alpha_k = 1 / N_k`.
    pub fn alphas(&self) -> Vec<f64> {
        self.sizes.iter().map(|&n| 1.0 / n as f64).collect()
    }

    /// Weights proportional to `alpha_k`: `prod_{j != k} N_j`, which are exact
    /// integers for realistic sizes. Falls back to `alpha_k` on overflow.
    pub fn balance_weights(&self) -> Vec<f64> {
        let w: Vec<f64> = (0..self.sizes.len())
            .map(|k| {
                self.sizes
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != k)
                    .map(|(_, &n)| n as f64)
                    .product()
            })
            .collect();
        if w.iter().all(|v| v.is_finite()) {
            w
        } else {
            self.alphas()
        }
    }
}

/// How a layer picks the expert for each sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteMode {
    /// Draw from `P(E|x)` with a per-sample generator.
    Sample,
    /// Highest `P(E|x)`, lowest index on ties.
    Argmax,
    /// Router bypassed: expert index equals the sample's group label.
    GroupLabel,
    /// Caller-provided expert per sample.
    Forced,
    /// Output is the `P(E|x)`-weighted sum of all experts.
    SoftMixture,
}

impl RouteMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RouteMode::Sample => "sample",
            RouteMode::Argmax => "argmax",
            RouteMode::GroupLabel => "group_label",
            RouteMode::Forced => "forced",
            RouteMode::SoftMixture => "soft_mixture",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            RouteMode::Sample,
            RouteMode::Argmax,
            RouteMode::GroupLabel,
            RouteMode::Forced,
            RouteMode::SoftMixture,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
    }
}

/// Router decision for one sample at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub sample_id: u64,
    pub layer_index: usize,
    pub mode: RouteMode,
    pub chosen: usize,
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// One expert: a conv kernel and bias.
#[derive(Debug, Clone)]
pub struct ExpertConv {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ExpertConv {
    pub fn apply(&self, x: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        x.conv2d(&self.kernel, &self.bias, stride, padding)
    }

    pub fn param_count(&self) -> usize {
        self.kernel.numel() + self.bias.numel()
    }
}

/// 1x1 conv to `r` channels, relu, global average pool, dense to `m` logits.
#[derive(Debug, Clone)]
pub struct Router {
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    pub dense_weight: Tensor,
    pub dense_bias: Tensor,
}

impl Router {
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.conv_weight, &self.conv_bias, 1, 0)?
            .relu()
            .global_avg_pool()?
            .dense(&self.dense_weight, &self.dense_bias)
    }

    pub fn param_count(&self) -> usize {
        self.conv_weight.numel() + self.conv_bias.numel() + self.dense_weight.numel() + self.dense_bias.numel()
    }
}

/// Shape of a MoE conv layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoeLayerSpec {
    pub layer_index: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub experts: usize,
    pub router_width: usize,
}

#[derive(Debug, Clone)]
pub struct MoEConvLayer {
    spec: MoeLayerSpec,
    experts: Vec<ExpertConv>,
    router: Router,
}

/// Standard deviation of the router's final dense weights at initialization.
/// Uniform routing is a stationary point of the MI objective, so these
/// weights start small but not zero.
pub const ROUTER_INIT_STD: f64 = 0.01;

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..shape.iter().product::<usize>()).map(|_| dist.sample(rng)).collect()
}

/// He-normal draw for a conv kernel of the given shape.
pub fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Vec<f64> {
    normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}

impl MoEConvLayer {
    /// Builds a layer whose experts all start from one shared kernel draw and
    /// whose routing starts close to uniform.
    pub fn new(spec: MoeLayerSpec, rng: &mut impl Rng) -> Result<Self> {
        let MoeLayerSpec {
            in_channels: c,
            out_channels: o,
            kernel_size: k,
            experts: m,
            router_width: r,
            ..
        } = spec;
        if c == 0 || o == 0 || k == 0 || m == 0 || r == 0 || spec.stride == 0 {
            return invalid("MoEConvLayer", format!("all extents must be positive: {spec:?}"));
        }
        let kshape = [o, c, k, k];
        let kernel = he_normal(rng, &kshape, c * k * k);
        let experts = (0..m)
            .map(|_| {
                Ok(ExpertConv {
                    kernel: Tensor::param(&kshape, kernel.clone())?,
                    bias: Tensor::param(&[o], vec![0.0; o])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let router = Router {
            conv_weight: Tensor::param(&[r, c, 1, 1], he_normal(rng, &[r, c, 1, 1], c))?,
            conv_bias: Tensor::param(&[r], vec![0.0; r])?,
            dense_weight: Tensor::param(&[r, m], normal(rng, &[r, m], ROUTER_INIT_STD))?,
            dense_bias: Tensor::param(&[m], vec![0.0; m])?,
        };
        Self::from_parts(spec, experts, router)
    }

    /// Assembles a layer from explicit parameters, checking shape invariants.
    pub fn from_parts(spec: MoeLayerSpec, experts: Vec<ExpertConv>, router: Router) -> Result<Self> {
        let kshape = [spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size];
        if experts.len() != spec.experts {
            return invalid("MoEConvLayer", format!("{} experts for m = {}", experts.len(), spec.experts));
        }
        for (i, e) in experts.iter().enumerate() {
            if e.kernel.shape() != kshape || e.bias.shape() != [spec.out_channels] {
                return shape_err(
                    "MoEConvLayer",
                    format!("expert {i} has kernel {:?}, expected {kshape:?}", e.kernel.shape()),
                );
            }
        }
        let r = spec.router_width;
        if router.conv_weight.shape() != [r, spec.in_channels, 1, 1]
            || router.conv_bias.shape() != [r]
            || router.dense_weight.shape() != [r, spec.experts]
            || router.dense_bias.shape() != [spec.experts]
        {
            return shape_err("MoEConvLayer", "router parameter shapes do not match the layer spec");
        }
        if router.param_count() >= experts[0].param_count() {
            return invalid(
                "MoEConvLayer",
                format!(
                    "router has {} parameters, not fewer than one expert's {}",
                    router.param_count(),
                    experts[0].param_count()
                ),
            );
        }
        Ok(Self { spec, experts, router })
    }

    pub fn spec(&self) -> &MoeLayerSpec {
        &self.spec
    }

    pub fn layer_index(&self) -> usize {
        self.spec.layer_index
    }

    pub fn experts(&self) -> &[ExpertConv] {
        &self.experts
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn num_experts(&self) -> usize {
        self.spec.experts
    }

    /// Adds parameters under `layer{Y}.expert{k}.*` and `layer{Y}.router.*`.
    pub fn register(&self, params: &mut ParamSet) -> Result<()> {
        let y = self.spec.layer_index;
        for (k, e) in self.experts.iter().enumerate() {
            params.insert(format!("layer{y}.expert{k}.kernel"), e.kernel.clone())?;
            params.insert(format!("layer{y}.expert{k}.bias"), e.bias.clone())?;
        }
        params.insert(format!("layer{y}.router.conv.weight"), self.router.conv_weight.clone())?;
        params.insert(format!("layer{y}.router.conv.bias"), self.router.conv_bias.clone())?;
        params.insert(format!("layer{y}.router.dense.weight"), self.router.dense_weight.clone())?;
        params.insert(format!("layer{y}.router.dense.bias"), self.router.dense_bias.clone())?;
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.spec.in_channels {
            return shape_err(
                "moe layer",
                format!(
                    "layer {} expects NCHW input with {} channels, got {s:?}",
                    self.spec.layer_index, self.spec.in_channels
                ),
            );
        }
        Ok(())
    }
}

/// Router confidence scores `s(x)`: softmax over `m` logits, shape `[N, m]`.
pub fn route_scores(x: &Tensor, layer: &MoEConvLayer) -> Result<Tensor> {
    layer.check_input(x)?;
    layer.router.logits(x)?.softmax(1)
}

/// Inverse-group-size reweighting of one score vector.
pub fn selection_probabilities(scores: &[f64], stats: &GroupStats) -> Result<Vec<f64>> {
    if scores.len() != stats.groups() {
        return invalid(
            "selection_probabilities",
            format!("{} scores for {} groups", scores.len(), stats.groups()),
        );
    }
    if scores.iter().any(|s| !(*s >= 0.0)) {
        return invalid("selection_probabilities", format!("scores must be nonnegative: {scores:?}"));
    }
    let weighted: Vec<f64> = scores.iter().zip(stats.balance_weights()).map(|(s, a)| s * a).collect();
    let total: f64 = weighted.iter().sum();
    if total <= 0.0 {
        return invalid("selection_probabilities", "all weighted scores are zero");
    }
    Ok(weighted.into_iter().map(|w| w / total).collect())
}

/// Differentiable batch version of [`selection_probabilities`] for `[N, m]` scores.
pub fn selection_probabilities_tensor(scores: &Tensor, stats: &GroupStats) -> Result<Tensor> {
    let s = scores.shape();
    if s.len() != 2 || s[1] != stats.groups() {
        return shape_err(
            "selection_probabilities",
            format!("scores {s:?} for {} groups", stats.groups()),
        );
    }
    let alphas = stats.balance_weights();
    let weights: Vec<f64> = (0..s[0]).flat_map(|_| alphas.iter().copied()).collect();
    scores.mul(&Tensor::new(s, weights)?)?.normalize_rows()
}

/// Expert pick rule for [`select_expert`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Sample,
    Argmax,
}

/// Picks an expert index from a probability vector.
pub fn select_expert(probabilities: &[f64], selection: Selection, rng: &mut impl Rng) -> usize {
    debug_assert!(!probabilities.is_empty());
    match selection {
        Selection::Argmax => argmax(probabilities),
        Selection::Sample => {
            let u: f64 = rng.random();
            let mut cumulative = 0.0;
            for (k, &p) in probabilities.iter().enumerate() {
                cumulative += p;
                if u < cumulative {
                    return k;
                }
            }
            // u landed in the rounding gap above the cumulative sum
            probabilities.iter().rposition(|&p| p > 0.0).unwrap_or(0)
        }
    }
}

/// Index of the largest value; first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// Generator for one sample at one layer: seeded by `seed ^ sample_id`, with
/// the layer index selecting the stream.
pub fn sample_rng(seed: u64, sample_id: u64, layer_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ sample_id);
    rng.set_stream(layer_index as u64);
    rng
}

/// Per-batch routing inputs.
#[derive(Debug, Clone, Copy)]
pub struct RouteContext<'a> {
    pub mode: RouteMode,
    pub seed: u64,
    pub sample_ids: &'a [u64],
    /// Group labels for [`RouteMode::GroupLabel`], expert indices for [`RouteMode::Forced`].
    pub labels: Option<&'a [usize]>,
}

#[derive(Debug, Clone)]
pub struct MoeOutput {
    pub output: Tensor,
    /// Router scores `[N, m]`, differentiable in router parameters.
    pub scores: Tensor,
    /// Selection probabilities `[N, m]`, differentiable in router parameters.
    pub probabilities: Tensor,
    pub records: Vec<RoutingRecord>,
}

/// Routes every sample of `x` and applies the selected expert.
pub fn moe_forward(
    x: &Tensor,
    layer: &MoEConvLayer,
    stats: &GroupStats,
    ctx: &RouteContext<'_>,
) -> Result<MoeOutput> {
    let n = x.shape().first().copied().unwrap_or(0);
    let m = layer.num_experts();
    if stats.groups() != m {
        return invalid("moe_forward", format!("{} groups for {m} experts", stats.groups()));
    }
    if ctx.sample_ids.len() != n {
        return invalid("moe_forward", format!("{} sample ids for batch of {n}", ctx.sample_ids.len()));
    }
    let scores = route_scores(x, layer)?;
    let probabilities = selection_probabilities_tensor(&scores, stats)?;
    let (sv, pv) = (scores.to_vec(), probabilities.to_vec());

    let chosen: Vec<usize> = match ctx.mode {
        RouteMode::Sample => (0..n)
            .map(|i| {
                let mut rng = sample_rng(ctx.seed, ctx.sample_ids[i], layer.layer_index());
                select_expert(&pv[i * m..(i + 1) * m], Selection::Sample, &mut rng)
            })
            .collect(),
        RouteMode::Argmax | RouteMode::SoftMixture => {
            (0..n).map(|i| argmax(&pv[i * m..(i + 1) * m])).collect()
        }
        RouteMode::GroupLabel | RouteMode::Forced => {
            let Some(labels) = ctx.labels else {
                return invalid("moe_forward", format!("{} routing needs labels", ctx.mode.as_str()));
            };
            if labels.len() != n {
                return invalid("moe_forward", format!("{} labels for batch of {n}", labels.len()));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
                return invalid("moe_forward", format!("expert label {bad} outside [0, {m})"));
            }
            labels.to_vec()
        }
    };

    let (stride, padding) = (layer.spec.stride, layer.spec.padding);
    let output = if ctx.mode == RouteMode::SoftMixture {
        let mut acc: Option<Tensor> = None;
        for (k, expert) in layer.experts.iter().enumerate() {
            let mut unit = vec![0.0; m];
            unit[k] = 1.0;
            let weight = probabilities.matmul(&Tensor::new(&[m, 1], unit)?)?.reshape(&[n])?;
            let term = expert.apply(x, stride, padding)?.scale_rows(&weight)?;
            acc = Some(match acc {
                Some(a) => a.add(&term)?,
                None => term,
            });
        }
        acc.expect("at least one expert")
    } else {
        let mut parts = Vec::new();
        for (k, expert) in layer.experts.iter().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&i| chosen[i] == k).collect();
            if rows.is_empty() {
                continue;
            }
            if rows.len() == n {
                parts.clear();
                parts.push((expert.apply(x, stride, padding)?, rows));
                break;
            }
            parts.push((expert.apply(&x.gather_rows(&rows)?, stride, padding)?, rows));
        }
        if parts.len() == 1 && parts[0].1.len() == n {
            parts.pop().expect("one part").0
        } else {
            Tensor::stitch_rows(parts, n)?
        }
    };

    let records = (0..n)
        .map(|i| RoutingRecord {
            sample_id: ctx.sample_ids[i],
            layer_index: layer.layer_index(),
            mode: ctx.mode,
            chosen: chosen[i],
            scores: sv[i * m..(i + 1) * m].to_vec(),
            probabilities: pv[i * m..(i + 1) * m].to_vec(),
        })
        .collect();
    Ok(MoeOutput {
        output,
        scores,
        probabilities,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(m: usize) -> MoeLayerSpec {
        MoeLayerSpec {
            layer_index: 0,
            in_channels: 2,
            out_channels: 4,
            kernel_size: 3,
            stride: 1,
            padding: 1,
            experts: m,
            router_width: 2,
        }
    }

    fn input(n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = (0..n * 2 * 5 * 5).map(|_| rng.random::<f64>()).collect();
        Tensor::new(&[n, 2, 5, 5], v).unwrap()
    }

    #[test]
    fn group_stats_priors_and_alphas() {
        let g = GroupStats::new(vec![100, 200, 700]).unwrap();
        let p = g.priors();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(g.alphas()[1], 1.0 / 200.0);
        assert!(GroupStats::new(vec![3, 0]).is_err());
        assert!(GroupStats::from_labels([0, 1, 2], 2).is_err());
    }

    #[test]
    fn balance_weights_are_proportional_to_alphas() {
        let g = GroupStats::new(vec![100, 200, 700]).unwrap();
        assert_eq!(g.balance_weights(), vec![140_000.0, 70_000.0, 20_000.0]);
        let huge = GroupStats::new(vec![u64::MAX; 20]).unwrap();
        assert_eq!(huge.balance_weights(), huge.alphas());
    }

    #[test]
    fn selection_probability_examples() {
        let p = selection_probabilities(&[0.5, 0.5], &GroupStats::new(vec![100, 200]).unwrap()).unwrap();
        assert_eq!(p, vec![2.0 / 3.0, 1.0 / 3.0]);
        let eq = GroupStats::new(vec![50, 50]).unwrap();
        let p = selection_probabilities(&[0.8, 0.2], &eq).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15 && (p[1] - 0.2).abs() < 1e-15);
        let p = selection_probabilities(&[1.0, 0.0], &GroupStats::new(vec![7, 900]).unwrap()).unwrap();
        assert_eq!(p, vec![1.0, 0.0]);
        assert!(selection_probabilities(&[0.0, 0.0], &eq).is_err());
        assert!(selection_probabilities(&[-0.1, 1.1], &eq).is_err());
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_expert(&[0.7, 0.3], Selection::Argmax, &mut rng), 0);
        assert_eq!(select_expert(&[0.25, 0.5, 0.25], Selection::Argmax, &mut rng), 1);
        assert_eq!(select_expert(&[0.5, 0.5], Selection::Argmax, &mut rng), 0);
    }

    #[test]
    fn sampling_is_seeded() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..64).map(|_| select_expert(&[0.3, 0.3, 0.4], Selection::Sample, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    #[test]
    fn zero_init_router_scores_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = MoEConvLayer::new(spec(2), &mut rng).unwrap();
        let s = route_scores(&input(3), &layer).unwrap().to_vec();
        assert!(s.iter().all(|&v| (v - 0.5).abs() < 0.05), "{s:?}");
        assert!(s.chunks(2).all(|r| (r[0] + r[1] - 1.0).abs() < 1e-12));

        layer.router().dense_weight.data_mut().fill(0.0);
        let s = route_scores(&input(3), &layer).unwrap();
        assert_eq!(s.shape(), &[3, 2]);
        assert!(s.to_vec().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn router_smaller_than_expert() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = MoEConvLayer::new(spec(2), &mut rng).unwrap();
        assert!(layer.router().param_count() < layer.experts()[0].param_count());
        let mut wide = spec(2);
        wide.router_width = 64;
        assert!(MoEConvLayer::new(wide, &mut rng).is_err());
    }

    #[test]
    fn single_expert_degenerates_to_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = MoEConvLayer::new(spec(1), &mut rng).unwrap();
        let x = input(4);
        let ids = [0, 1, 2, 3];
        let ctx = RouteContext { mode: RouteMode::Sample, seed: 9, sample_ids: &ids, labels: None };
        let out = moe_forward(&x, &layer, &GroupStats::new(vec![4]).unwrap(), &ctx).unwrap();
        let plain = layer.experts()[0].apply(&x, 1, 1).unwrap();
        assert_eq!(out.output.to_vec(), plain.to_vec());
        assert!(out.records.iter().all(|r| r.chosen == 0 && r.scores == vec![1.0]));
    }

    #[test]
    fn rejects_wrong_input_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = MoEConvLayer::new(spec(2), &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 3, 5, 5]);
        assert!(route_scores(&x, &layer).is_err());
    }

    #[test]
    fn route_mode_names_round_trip() {
        for m in [RouteMode::Sample, RouteMode::Argmax, RouteMode::GroupLabel, RouteMode::Forced, RouteMode::SoftMixture] {
            assert_eq!(RouteMode::parse(m.as_str()), Some(m));
        }
    }
}
