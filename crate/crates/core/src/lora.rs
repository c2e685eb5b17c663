//! Per-agent low-rank adapters on the actor's weight matrices.
//!
//! Each placed layer `ℓ` with weight `θ^ℓ ∈ R^{d×k}` gets factors
//! `A ∈ R^{d×r}`, `B ∈ R^{r×k}` and the agent's effective weight is
//! `θ^ℓ + A·B`. Writing the offset as `A·Bᵀ` with `B ∈ R^{k×r}` describes the
//! same object; this module stores `B` as `r×k`.
//!
//! There is no `α/r` scale. `A` starts at zero and `B ~ N(0, 1/k)`, so every
//! offset is exactly zero until `A` moves.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ActorArchitecture, ActorParams, LayerId};
use crate::numerics::{Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankSpec {
    Fixed(usize),
    /// `min(d, k)` of each layer.
    Full,
}

impl RankSpec {
    pub fn for_layer(&self, rows: usize, cols: usize) -> usize {
        match *self {
            RankSpec::Fixed(r) => r,
            RankSpec::Full => rows.min(cols),
        }
    }
}

impl fmt::Display for RankSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankSpec::Fixed(r) => write!(f, "{r}"),
            RankSpec::Full => f.write_str("full"),
        }
    }
}

impl FromStr for RankSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("full") {
            return Ok(RankSpec::Full);
        }
        match s.parse::<usize>() {
            Ok(0) => Err(Error::config("lora.rank", "rank must be at least 1")),
            Ok(r) => Ok(RankSpec::Fixed(r)),
            Err(_) => Err(Error::config("lora.rank", format!("`{s}` is not a rank"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    All,
    Fc1Only,
    Fc2Only,
    GruOnly,
    PostOnly,
    HeadOnly,
    Layers(BTreeSet<LayerId>),
}

impl Placement {
    pub const PRESETS: [Placement; 6] = [
        Placement::All,
        Placement::Fc1Only,
        Placement::Fc2Only,
        Placement::GruOnly,
        Placement::PostOnly,
        Placement::HeadOnly,
    ];

    /// Adapted layers for `arch`; heads include the log-std head when present.
    pub fn layers(&self, arch: &ActorArchitecture) -> Result<BTreeSet<LayerId>> {
        let pick = |ids: &[LayerId]| -> BTreeSet<LayerId> {
            ids.iter().copied().filter(|&l| arch.has_layer(l)).collect()
        };
        Ok(match self {
            Placement::All => pick(arch.layer_ids()),
            Placement::Fc1Only => pick(&[LayerId::Fc1]),
            Placement::Fc2Only => pick(&[LayerId::Fc2]),
            Placement::GruOnly => pick(&[LayerId::GruX, LayerId::GruH]),
            Placement::PostOnly => pick(&[LayerId::Post]),
            Placement::HeadOnly => pick(&[LayerId::Head, LayerId::LogStd]),
            Placement::Layers(set) => {
                if let Some(l) = set.iter().find(|l| !arch.has_layer(**l)) {
                    return Err(Error::config(
                        "lora.placement",
                        format!("layer {l} does not exist in this architecture"),
                    ));
                }
                set.clone()
            }
        })
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::All => f.write_str("all"),
            Placement::Fc1Only => f.write_str("fc1-only"),
            Placement::Fc2Only => f.write_str("fc2-only"),
            Placement::GruOnly => f.write_str("gru-only"),
            Placement::PostOnly => f.write_str("post-only"),
            Placement::HeadOnly => f.write_str("head-only"),
            Placement::Layers(set) => {
                let names: Vec<&str> = set.iter().map(|l| l.name()).collect();
                f.write_str(&names.join("+"))
            }
        }
    }
}

impl FromStr for Placement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "all" => Placement::All,
            "fc1-only" => Placement::Fc1Only,
            "fc2-only" => Placement::Fc2Only,
            "gru-only" => Placement::GruOnly,
            "post-only" => Placement::PostOnly,
            "head-only" => Placement::HeadOnly,
            other => {
                let mut set = BTreeSet::new();
                for part in other.split(['+', ',']).filter(|p| !p.is_empty()) {
                    let id = part.trim().parse::<LayerId>().map_err(|_| {
                        Error::config("lora.placement", format!("unknown placement `{other}`"))
                    })?;
                    set.insert(id);
                }
                if set.is_empty() {
                    return Err(Error::config("lora.placement", "empty placement"));
                }
                Placement::Layers(set)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: RankSpec,
    pub placement: Placement,
    /// Accept `r > min(d, k)` on small layers such as a 5-way head.
    pub allow_overcomplete: bool,
}

impl LoraSpec {
    pub fn new(rank: RankSpec, placement: Placement) -> Self {
        Self { rank, placement, allow_overcomplete: true }
    }

    pub fn strict(rank: RankSpec, placement: Placement) -> Self {
        Self { rank, placement, allow_overcomplete: false }
    }

    /// `(layer, d, k, r)` for each placed layer, validated.
    pub fn resolve(&self, arch: &ActorArchitecture) -> Result<Vec<(LayerId, usize, usize, usize)>> {
        let mut out = Vec::new();
        for id in self.placement.layers(arch)? {
            let spec = arch.layer(id);
            let r = self.rank.for_layer(spec.rows, spec.cols);
            if r == 0 {
                return Err(Error::Rank(format!("rank 0 on layer {id}")));
            }
            if !self.allow_overcomplete && r > spec.rows.min(spec.cols) {
                return Err(Error::Rank(format!(
                    "rank {r} exceeds min dimension {} of layer {id} ({}x{})",
                    spec.rows.min(spec.cols),
                    spec.rows,
                    spec.cols
                )));
            }
            out.push((id, spec.rows, spec.cols, r));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub layer: LayerId,
    /// d × r
    pub a: Matrix,
    /// r × k
    pub b: Matrix,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    /// δθ = A·B
    pub fn delta(&self) -> Matrix {
        self.a.matmul(&self.b).expect("adapter factor shapes")
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    pub agent: usize,
    pub spec: LoraSpec,
    /// One adapter per placed layer, in layer order.
    pub adapters: Vec<LoraAdapter>,
}

impl AdapterSet {
    pub fn get(&self, layer: LayerId) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.layer == layer)
    }

    pub fn param_count(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::param_count).sum()
    }

    pub fn layers(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.adapters.iter().map(|a| a.layer)
    }

    /// Factors in a fixed order `[A₀, B₀, A₁, B₁, …]` for optimisers.
    pub fn factors_mut(&mut self) -> Vec<&mut Matrix> {
        self.adapters.iter_mut().flat_map(|a| [&mut a.a, &mut a.b]).collect()
    }

    pub fn factors(&self) -> Vec<&Matrix> {
        self.adapters.iter().flat_map(|a| [&a.a, &a.b]).collect()
    }
}

/// `A = 0`, `B ~ N(0, 1/k)` on every placed layer.
pub fn init_adapters(
    arch: &ActorArchitecture,
    spec: &LoraSpec,
    agent: usize,
    rng: &mut RngStream,
) -> Result<AdapterSet> {
    let mut adapters = Vec::new();
    for (layer, d, k, r) in spec.resolve(arch)? {
        let std = (1.0 / k as f64).sqrt();
        let b = Matrix::from_fn(r, k, |_, _| std * rng.normal());
        adapters.push(LoraAdapter { layer, a: Matrix::zeros(d, r), b });
    }
    Ok(AdapterSet { agent, spec: spec.clone(), adapters })
}

fn check_adapter(shared: &ActorParams, ad: &LoraAdapter) -> Result<()> {
    if !shared.arch.has_layer(ad.layer) {
        return Err(Error::Shape(format!("adapter on missing layer {}", ad.layer)));
    }
    let w = shared.weight(ad.layer);
    if ad.a.rows() != w.rows() || ad.b.cols() != w.cols() || ad.a.cols() != ad.b.rows() {
        return Err(Error::Shape(format!(
            "adapter {} factors {:?}·{:?} do not fit weight {:?}",
            ad.layer,
            ad.a.shape(),
            ad.b.shape(),
            w.shape()
        )));
    }
    Ok(())
}

fn add_delta(w: &mut Matrix, delta: &Matrix) {
    for (x, &d) in w.as_mut_slice().iter_mut().zip(delta.as_slice()) {
        if d != 0.0 {
            *x += d;
        }
    }
}

/// θ^ℓ + A·B on placed layers, θ^ℓ elsewhere; one matrix per layer.
pub fn effective_weights(shared: &ActorParams, set: &AdapterSet) -> Result<Vec<Matrix>> {
    let mut out = shared.weights.clone();
    for ad in &set.adapters {
        check_adapter(shared, ad)?;
        add_delta(&mut out[ad.layer.index()], &ad.delta());
    }
    Ok(out)
}

/// `(∂L/∂A, ∂L/∂B) = (G·Bᵀ, Aᵀ·G)` per adapter, `G = ∂L/∂(effective weight)`.
pub fn adapter_gradients(set: &AdapterSet, grad_effective: &[Matrix]) -> Result<Vec<(Matrix, Matrix)>> {
    let mut out = Vec::with_capacity(set.adapters.len());
    for ad in &set.adapters {
        let g = grad_effective.get(ad.layer.index()).ok_or_else(|| {
            Error::Shape(format!("no effective-weight gradient for layer {}", ad.layer))
        })?;
        if g.shape() != (ad.a.rows(), ad.b.cols()) {
            return Err(Error::Shape(format!(
                "gradient {:?} vs adapter product ({}, {}) on {}",
                g.shape(),
                ad.a.rows(),
                ad.b.cols(),
                ad.layer
            )));
        }
        out.push((g.matmul_t(&ad.b)?, ad.a.t_matmul(g)?));
    }
    Ok(out)
}

/// Standalone parameters with the adapters folded into the weights.
pub fn merge(shared: &ActorParams, set: &AdapterSet) -> Result<ActorParams> {
    let mut merged = shared.clone();
    merged.weights = effective_weights(shared, set)?;
    Ok(merged)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    /// Σ_agents Σ_ℓ r(d_ℓ + k_ℓ)
    pub adapter: usize,
    /// One backbone, weights and biases.
    pub backbone: usize,
}

/// Σ_ℓ r(d_ℓ + k_ℓ) per agent over placed layers, times the agent count.
pub fn trainable_param_count(
    arch: &ActorArchitecture,
    rank: RankSpec,
    placement: &Placement,
    n_agents: usize,
) -> Result<ParamCount> {
    let per_agent: usize = placement
        .layers(arch)?
        .into_iter()
        .map(|id| {
            let l = arch.layer(id);
            rank.for_layer(l.rows, l.cols) * (l.rows + l.cols)
        })
        .sum();
    Ok(ParamCount { adapter: per_agent * n_agents, backbone: arch.param_count() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ActionKind;

    fn arch() -> ActorArchitecture {
        ActorArchitecture::new(6, 2, 8, ActionKind::Discrete { n_actions: 3 }).unwrap()
    }

    #[test]
    fn init_gives_zero_offsets() {
        let arch = arch();
        for r in [1, 2, 3] {
            let set = init_adapters(&arch, &LoraSpec::new(RankSpec::Fixed(r), Placement::All), 0, &mut RngStream::new(1, 0))
                .unwrap();
            assert_eq!(set.adapters.len(), 6);
            for ad in &set.adapters {
                assert!(ad.delta().as_slice().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn same_seed_same_b() {
        let spec = LoraSpec::new(RankSpec::Fixed(2), Placement::GruOnly);
        let a = init_adapters(&arch(), &spec, 0, &mut RngStream::new(5, 1)).unwrap();
        let b = init_adapters(&arch(), &spec, 0, &mut RngStream::new(5, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn strict_rank_names_layer() {
        let spec = LoraSpec::strict(RankSpec::Fixed(4), Placement::All);
        let err = init_adapters(&arch(), &spec, 0, &mut RngStream::new(0, 0)).unwrap_err();
        assert!(err.to_string().contains("head"), "{err}");
        let ok = LoraSpec::strict(RankSpec::Full, Placement::All);
        assert!(init_adapters(&arch(), &ok, 0, &mut RngStream::new(0, 0)).is_ok());
    }

    #[test]
    fn rank_one_outer_product() {
        let arch = arch();
        let p = ActorParams::init(arch, &mut RngStream::new(9, 0));
        let mut set =
            init_adapters(&arch, &LoraSpec::new(RankSpec::Fixed(1), Placement::Fc2Only), 0, &mut RngStream::new(1, 1)).unwrap();
        let ad = &mut set.adapters[0];
        ad.a.fill(0.0);
        ad.b.fill(0.0);
        ad.a.set(0, 0, 1.0);
        ad.b.set(0, 0, 1.0);
        let eff = effective_weights(&p, &set).unwrap();
        let diff = eff[LayerId::Fc2.index()].sub(p.weight(LayerId::Fc2)).unwrap();
        for i in 0..diff.rows() {
            for j in 0..diff.cols() {
                let want = if i == 0 && j == 0 { 1.0 } else { 0.0 };
                assert!((diff.get(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_adapters_merge_bitwise() {
        let arch = arch();
        let p = ActorParams::init(arch, &mut RngStream::new(9, 0));
        let set = init_adapters(&arch, &LoraSpec::new(RankSpec::Full, Placement::All), 0, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(merge(&p, &set).unwrap(), p);
    }

    #[test]
    fn zero_a_blocks_b_gradient() {
        let arch = arch();
        let set = init_adapters(&arch, &LoraSpec::new(RankSpec::Fixed(2), Placement::All), 0, &mut RngStream::new(1, 1)).unwrap();
        let mut rng = RngStream::new(3, 3);
        let grads: Vec<Matrix> = arch
            .layers()
            .iter()
            .map(|l| Matrix::from_fn(l.rows, l.cols, |_, _| rng.normal()))
            .collect();
        for (ga, gb) in adapter_gradients(&set, &grads).unwrap() {
            assert!(gb.as_slice().iter().all(|&v| v == 0.0));
            assert!(ga.sum_sq() > 0.0);
        }
        let zero: Vec<Matrix> = arch.layers().iter().map(|l| Matrix::zeros(l.rows, l.cols)).collect();
        for (ga, gb) in adapter_gradients(&set, &zero).unwrap() {
            assert_eq!(ga.sum_sq() + gb.sum_sq(), 0.0);
        }
        assert!(adapter_gradients(&set, &zero[..2]).is_err());
    }

    #[test]
    fn counting() {
        let one = ActorArchitecture::new(64, 0, 64, ActionKind::Discrete { n_actions: 5 }).unwrap();
        let c = trainable_param_count(&one, RankSpec::Fixed(8), &Placement::Fc1Only, 1).unwrap();
        assert_eq!(c.adapter, 8 * (64 + 64));
        let none = trainable_param_count(&one, RankSpec::Fixed(8), &Placement::Layers(BTreeSet::new()), 3).unwrap();
        assert_eq!(none.adapter, 0);
    }

    #[test]
    fn parse_specs() {
        assert_eq!("full".parse::<RankSpec>().unwrap(), RankSpec::Full);
        assert!("0".parse::<RankSpec>().is_err());
        assert_eq!("gru-only".parse::<Placement>().unwrap(), Placement::GruOnly);
        let custom: Placement = "fc1+head".parse().unwrap();
        assert_eq!(custom.to_string(), "fc1+head");
        assert!("bogus".parse::<Placement>().is_err());
    }
}
