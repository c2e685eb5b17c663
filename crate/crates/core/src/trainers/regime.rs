//! Policy parameterisation regimes and the trainable "units" each one exposes.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::{self, AdapterSet, LoraSpec};
use crate::nn::{ActorArchitecture, ActorGrads, ActorParams, LayerId};
use crate::numerics::{orthogonal, Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeKind {
    PsId,
    Nps,
    Mtl,
    ClusterShared,
    PsLora,
    ClusterLora,
}

impl RegimeKind {
    pub const ALL: [RegimeKind; 6] = [
        RegimeKind::PsId,
        RegimeKind::Nps,
        RegimeKind::Mtl,
        RegimeKind::ClusterShared,
        RegimeKind::PsLora,
        RegimeKind::ClusterLora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegimeKind::PsId => "ps-id",
            RegimeKind::Nps => "nps",
            RegimeKind::Mtl => "mtl",
            RegimeKind::ClusterShared => "cluster-shared",
            RegimeKind::PsLora => "ps-lora",
            RegimeKind::ClusterLora => "cluster-lora",
        }
    }

    pub fn is_lora(self) -> bool {
        matches!(self, RegimeKind::PsLora | RegimeKind::ClusterLora)
    }

    pub fn is_clustered(self) -> bool {
        matches!(self, RegimeKind::ClusterShared | RegimeKind::ClusterLora)
    }

    /// Regime whose checkpoint a fine-tuning run starts from.
    pub fn backbone_kind(self) -> RegimeKind {
        match self {
            RegimeKind::PsLora => RegimeKind::PsId,
            RegimeKind::ClusterLora => RegimeKind::ClusterShared,
            k => k,
        }
    }

    /// One-hot ids are appended whenever a backbone is shared between agents.
    pub fn uses_agent_id(self) -> bool {
        self != RegimeKind::Nps
    }
}

impl fmt::Display for RegimeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegimeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        RegimeKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::config("regime.kind", format!("unknown regime `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub kind: RegimeKind,
    /// agent → cluster; empty unless the kind is clustered.
    pub clusters: Vec<usize>,
    pub lora: Option<LoraSpec>,
}

impl RegimeSpec {
    pub fn simple(kind: RegimeKind) -> Self {
        Self { kind, clusters: Vec::new(), lora: None }
    }

    pub fn lora(kind: RegimeKind, spec: LoraSpec) -> Self {
        Self { kind, clusters: Vec::new(), lora: Some(spec) }
    }

    pub fn validate(&self, n_agents: usize) -> Result<()> {
        if self.kind.is_clustered() {
            if self.clusters.len() != n_agents {
                return Err(Error::config(
                    "regime.clusters",
                    format!("cluster map has {} entries for {n_agents} agents", self.clusters.len()),
                ));
            }
            let k = self.n_clusters();
            if (0..k).any(|c| !self.clusters.contains(&c)) {
                return Err(Error::config("regime.clusters", "cluster labels must be 0..K-1 with none empty"));
            }
        } else if !self.clusters.is_empty() {
            return Err(Error::config("regime.clusters", "cluster map given for a non-clustered regime"));
        }
        if self.kind.is_lora() != self.lora.is_some() {
            return Err(Error::config("lora.rank", "adapter settings apply to exactly the lora regimes"));
        }
        Ok(())
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.iter().max().map_or(0, |m| m + 1)
    }

    pub fn n_backbones(&self, n_agents: usize) -> usize {
        match self.kind {
            RegimeKind::Nps => n_agents,
            RegimeKind::ClusterShared | RegimeKind::ClusterLora => self.n_clusters(),
            _ => 1,
        }
    }

    pub fn backbone_of(&self, agent: usize) -> usize {
        match self.kind {
            RegimeKind::Nps => agent,
            RegimeKind::ClusterShared | RegimeKind::ClusterLora => self.clusters[agent],
            _ => 0,
        }
    }

    pub fn id_dim(&self, n_agents: usize) -> usize {
        if self.kind.uses_agent_id() {
            n_agents
        } else {
            0
        }
    }
}

/// Per-agent output layers for the multi-task regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// One entry per head layer of the architecture, in layer order.
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    Backbone(usize),
    /// Shared trunk plus every agent's head.
    MtlJoint,
    Adapter(usize),
}

/// A group of parameters updated by one optimiser.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unit {
    pub kind: UnitKind,
    pub agents: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySet {
    pub regime: RegimeSpec,
    pub n_agents: usize,
    pub backbones: Vec<ActorParams>,
    pub heads: Vec<HeadParams>,
    pub adapters: Vec<AdapterSet>,
}

fn head_ids(arch: &ActorArchitecture) -> Vec<LayerId> {
    arch.layer_ids().iter().copied().filter(|l| l.is_head()).collect()
}

fn trunk_ids(arch: &ActorArchitecture) -> Vec<LayerId> {
    arch.layer_ids().iter().copied().filter(|l| !l.is_head()).collect()
}

impl PolicySet {
    /// Fresh parameters for a non-adapter regime.
    pub fn init(regime: RegimeSpec, arch: ActorArchitecture, n_agents: usize, rng: &mut RngStream) -> Result<Self> {
        regime.validate(n_agents)?;
        if regime.kind.is_lora() {
            return Err(Error::config("regime.kind", "adapter regimes start from a pretrained checkpoint"));
        }
        if arch.id_dim != regime.id_dim(n_agents) {
            return Err(Error::Shape(format!(
                "architecture id width {} but regime {} needs {}",
                arch.id_dim,
                regime.kind,
                regime.id_dim(n_agents)
            )));
        }
        let backbones =
            (0..regime.n_backbones(n_agents)).map(|_| ActorParams::init(arch, rng)).collect();
        let heads = if regime.kind == RegimeKind::Mtl {
            (0..n_agents)
                .map(|_| {
                    let ids = head_ids(&arch);
                    HeadParams {
                        weights: ids
                            .iter()
                            .map(|&id| {
                                let l = arch.layer(id);
                                orthogonal(l.rows, l.cols, l.init_gain, rng)
                            })
                            .collect(),
                        biases: ids.iter().map(|&id| Matrix::zeros(1, arch.layer(id).rows)).collect(),
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self { regime, n_agents, backbones, heads, adapters: Vec::new() })
    }

    /// Freeze a shared-backbone policy and attach zero-offset adapters.
    pub fn with_adapters(pretrained: &PolicySet, spec: LoraSpec, rng: &mut RngStream) -> Result<Self> {
        let kind = match pretrained.regime.kind {
            RegimeKind::PsId => RegimeKind::PsLora,
            RegimeKind::ClusterShared => RegimeKind::ClusterLora,
            other => {
                return Err(Error::Lineage(format!(
                    "adapters need a shared-backbone checkpoint, found regime {other}"
                )))
            }
        };
        let regime = RegimeSpec { kind, clusters: pretrained.regime.clusters.clone(), lora: Some(spec.clone()) };
        let arch = pretrained.arch();
        let adapters = (0..pretrained.n_agents)
            .map(|i| lora::init_adapters(&arch, &spec, i, &mut rng.fork(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            regime,
            n_agents: pretrained.n_agents,
            backbones: pretrained.backbones.clone(),
            heads: Vec::new(),
            adapters,
        })
    }

    pub fn arch(&self) -> ActorArchitecture {
        self.backbones[0].arch
    }

    pub fn backbone_for(&self, agent: usize) -> &ActorParams {
        &self.backbones[self.regime.backbone_of(agent)]
    }

    /// Effective weights for `agent` when it carries adapters.
    pub fn effective_override(&self, agent: usize) -> Result<Option<Vec<Matrix>>> {
        if self.regime.kind.is_lora() {
            Ok(Some(lora::effective_weights(self.backbone_for(agent), &self.adapters[agent])?))
        } else {
            Ok(None)
        }
    }

    /// Standalone parameters `agent` acts with (merged for adapter regimes).
    pub fn agent_params(&self, agent: usize) -> Result<Cow<'_, ActorParams>> {
        if agent >= self.n_agents {
            return Err(Error::InvalidArgument(format!("agent {agent} out of range")));
        }
        match self.regime.kind {
            RegimeKind::Mtl => {
                let mut p = self.backbones[0].clone();
                let h = &self.heads[agent];
                for (k, id) in head_ids(&p.arch).into_iter().enumerate() {
                    p.weights[id.index()] = h.weights[k].clone();
                    p.biases[id.index()] = h.biases[k].clone();
                }
                Ok(Cow::Owned(p))
            }
            k if k.is_lora() => Ok(Cow::Owned(lora::merge(self.backbone_for(agent), &self.adapters[agent])?)),
            _ => Ok(Cow::Borrowed(self.backbone_for(agent))),
        }
    }

    pub fn units(&self) -> Vec<Unit> {
        let n = self.n_agents;
        match self.regime.kind {
            RegimeKind::Mtl => vec![Unit { kind: UnitKind::MtlJoint, agents: (0..n).collect() }],
            RegimeKind::PsLora | RegimeKind::ClusterLora => {
                (0..n).map(|i| Unit { kind: UnitKind::Adapter(i), agents: vec![i] }).collect()
            }
            _ => (0..self.regime.n_backbones(n))
                .map(|b| Unit {
                    kind: UnitKind::Backbone(b),
                    agents: (0..n).filter(|&i| self.regime.backbone_of(i) == b).collect(),
                })
                .collect(),
        }
    }

    pub fn unit_of(&self, agent: usize) -> usize {
        match self.regime.kind {
            RegimeKind::Mtl => 0,
            RegimeKind::PsLora | RegimeKind::ClusterLora => agent,
            _ => self.regime.backbone_of(agent),
        }
    }

    /// Parameters the optimiser of `unit` owns, in a fixed order.
    pub fn trainable_mut(&mut self, unit: &Unit) -> Vec<&mut Matrix> {
        match unit.kind {
            UnitKind::Backbone(b) => {
                let p = &mut self.backbones[b];
                p.weights.iter_mut().chain(p.biases.iter_mut()).collect()
            }
            UnitKind::MtlJoint => {
                let trunk: Vec<usize> = trunk_ids(&self.backbones[0].arch).iter().map(|l| l.index()).collect();
                let p = &mut self.backbones[0];
                let mut out: Vec<&mut Matrix> = Vec::new();
                out.extend(p.weights.iter_mut().enumerate().filter(|(i, _)| trunk.contains(i)).map(|(_, m)| m));
                out.extend(p.biases.iter_mut().enumerate().filter(|(i, _)| trunk.contains(i)).map(|(_, m)| m));
                for h in &mut self.heads {
                    out.extend(h.weights.iter_mut());
                    out.extend(h.biases.iter_mut());
                }
                out
            }
            UnitKind::Adapter(i) => self.adapters[i].factors_mut(),
        }
    }

    pub fn trainable(&self, unit: &Unit) -> Vec<&Matrix> {
        match unit.kind {
            UnitKind::Backbone(b) => {
                let p = &self.backbones[b];
                p.weights.iter().chain(&p.biases).collect()
            }
            UnitKind::MtlJoint => {
                let trunk = trunk_ids(&self.backbones[0].arch);
                let p = &self.backbones[0];
                let mut out: Vec<&Matrix> = trunk.iter().map(|l| &p.weights[l.index()]).collect();
                out.extend(trunk.iter().map(|l| &p.biases[l.index()]));
                for h in &self.heads {
                    out.extend(h.weights.iter());
                    out.extend(h.biases.iter());
                }
                out
            }
            UnitKind::Adapter(i) => self.adapters[i].factors(),
        }
    }

    pub fn zero_grads(&self, unit: &Unit) -> Vec<Matrix> {
        self.trainable(unit).iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect()
    }

    /// Adds `agent`'s gradient with respect to the parameters it acted with
    /// into the unit-ordered gradient buffer.
    pub fn accumulate(&self, unit: &Unit, agent: usize, g: &ActorGrads, out: &mut [Matrix]) -> Result<()> {
        match unit.kind {
            UnitKind::Backbone(_) => {
                for (o, m) in out.iter_mut().zip(g.weights.iter().chain(&g.biases)) {
                    o.add_assign(m)?;
                }
            }
            UnitKind::MtlJoint => {
                let arch = self.arch();
                let trunk = trunk_ids(&arch);
                let heads = head_ids(&arch);
                let t = trunk.len();
                for (k, id) in trunk.iter().enumerate() {
                    out[k].add_assign(&g.weights[id.index()])?;
                    out[t + k].add_assign(&g.biases[id.index()])?;
                }
                let h = heads.len();
                let base = 2 * t + agent * 2 * h;
                for (k, id) in heads.iter().enumerate() {
                    out[base + k].add_assign(&g.weights[id.index()])?;
                    out[base + h + k].add_assign(&g.biases[id.index()])?;
                }
            }
            UnitKind::Adapter(i) => {
                if i != agent {
                    return Err(Error::Invariant(format!("agent {agent} data routed to adapter unit {i}")));
                }
                for (k, (ga, gb)) in lora::adapter_gradients(&self.adapters[i], &g.weights)?.into_iter().enumerate() {
                    out[2 * k].add_assign(&ga)?;
                    out[2 * k + 1].add_assign(&gb)?;
                }
            }
        }
        Ok(())
    }

    /// Number of scalars any optimiser updates.
    pub fn trainable_param_count(&self) -> usize {
        self.units().iter().map(|u| self.trainable(u).iter().map(|m| m.len()).sum::<usize>()).sum()
    }

    /// SHA-256 over every backbone's weights and biases.
    pub fn backbone_checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.backbones {
            for m in p.weights.iter().chain(&p.biases) {
                for v in m.as_slice() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}
