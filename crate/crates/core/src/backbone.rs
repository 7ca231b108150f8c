//! Scene encoder: a polyline subgraph encoder per agent and lane, then
//! interleaved agent self-attention and agent-to-map cross-attention rounds,
//! then attention over all tokens.
//!
//! Training and inference run on compacted inputs: only valid polylines are
//! encoded and attention is computed per scene among valid tokens, which is
//! exactly what masked attention over the padded layout yields for valid
//! rows. [`Backbone::encode_scene`] scatters the result back to the padded
//! layout with zero rows for padding. The masked, padded block functions are
//! kept as a reference path.

use scenegat_autograd::{attention, Graph, Linear, Mlp, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::scene::{AgentFeatureTensor, FeatureConfig, MapFeatureTensor, AGENT_FEATURE_DIM, MAP_FEATURE_DIM};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneConfig {
    /// Token width D.
    pub d_model: usize,
    /// Rounds of (agent self-attention, agent-to-map attention).
    pub n_interleave: usize,
    /// Rounds of attention over all tokens.
    pub m_alltoken: usize,
    pub subgraph_layers: usize,
    pub dropout: f64,
    /// Normalizes attention outputs before the update MLP.
    pub layer_norm: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_interleave: 2,
            m_alltoken: 3,
            subgraph_layers: 3,
            dropout: 0.1,
            layer_norm: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(Error::Config(format!("backbone.d_model = {} must be positive and even", self.d_model)));
        }
        if self.n_interleave == 0 || self.m_alltoken == 0 || self.subgraph_layers == 0 {
            return Err(Error::Config(format!("backbone round counts must be at least 1: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("backbone.dropout = {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Score entries computed by one interleaved round over `n_a` agents and
/// `n_m` lanes.
/// Length unit (m) of coordinates inside the network: encoders divide
/// their inputs by it and coordinate decoders multiply their outputs by it.
pub const COORD_SCALE: f64 = 10.0;

pub fn interleaved_round_pairs(n_a: usize, n_m: usize) -> usize {
    n_a * n_a + n_a * n_m
}

pub fn alltoken_round_pairs(n_a: usize, n_m: usize) -> usize {
    (n_a + n_m) * (n_a + n_m)
}

/// Per-row encoder applied to the segments of each polyline, pooling the
/// result to one token per polyline.
#[derive(Debug, Clone)]
pub struct SubgraphEncoder {
    layers: Vec<(Linear, Linear)>,
    d_model: usize,
}

impl SubgraphEncoder {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, config: &BackboneConfig, seed: u64) -> Result<Self> {
        let d = config.d_model;
        let mut layers = Vec::with_capacity(config.subgraph_layers);
        for l in 0..config.subgraph_layers {
            let fan_in = if l == 0 { in_dim } else { d };
            let enc = Linear::new(store, &format!("{name}.layer{l}.enc"), fan_in, d, true, seed)?;
            let fuse = Linear::new(store, &format!("{name}.layer{l}.fuse"), 2 * d, d, true, seed)?;
            layers.push((enc, fuse));
        }
        Ok(Self { layers, d_model: d })
    }

    pub fn param_count(in_dim: usize, config: &BackboneConfig) -> usize {
        let d = config.d_model;
        (0..config.subgraph_layers)
            .map(|l| Linear::param_count(if l == 0 { in_dim } else { d }, d, true) + Linear::param_count(2 * d, d, true))
            .sum()
    }

    /// `x` stacks the rows of every polyline; `polylines` lists each one's
    /// `(first_row, rows)`. Returns `[polylines, D]`.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>, polylines: &[(usize, usize)]) -> Result<Var<'g>> {
        let owner: Vec<usize> = polylines
            .iter()
            .enumerate()
            .flat_map(|(p, &(_, len))| std::iter::repeat_n(p, len))
            .collect();
        let mut h = g.scale(x, COORD_SCALE.recip());
        for (enc, fuse) in &self.layers {
            let e = g.relu(enc.forward(g, store, h)?);
            let pooled = g.segment_max(e, polylines)?;
            let spread = g.gather_rows(pooled, &owner)?;
            h = g.relu(fuse.forward(g, store, g.concat(&[e, spread], 1)?)?);
        }
        Ok(g.segment_max(h, polylines)?)
    }

    /// Encodes a padded `[N, S, F]` tensor; padded polylines give zero
    /// tokens.
    pub fn encode_padded<'g>(&self, g: &'g Graph, store: &ParamStore, data: &Tensor, valid: &[bool]) -> Result<Var<'g>> {
        let (rows, polylines) = stack_valid(data, valid)?;
        let slots: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
        if slots.is_empty() {
            return Ok(g.input(Tensor::zeros(&[valid.len(), self.d_model])));
        }
        let tokens = self.forward(g, store, g.input(rows), &polylines)?;
        scatter_rows(g, tokens, &slots, valid.len())
    }
}

/// Rows of the valid polylines of a padded `[N, S, F]` tensor, flattened
/// to `[valid·S, F]`, with each polyline's row span.
pub fn stack_valid(data: &Tensor, valid: &[bool]) -> Result<(Tensor, Vec<(usize, usize)>)> {
    let shape = data.shape();
    if shape.len() != 3 || shape[0] != valid.len() {
        return Err(Error::Config(format!("polyline tensor {shape:?} with {} mask flags", valid.len())));
    }
    let (s, f) = (shape[1], shape[2]);
    let mut rows = Vec::new();
    let mut spans = Vec::new();
    for (i, _) in valid.iter().enumerate().filter(|(_, v)| **v) {
        spans.push((spans.len() * s, s));
        rows.extend_from_slice(&data.data()[i * s * f..(i + 1) * s * f]);
    }
    Ok((Tensor::new(&[spans.len() * s, f], rows)?, spans))
}

/// Places row `k` of `x` at row `slots[k]` of an `n`-row result, zero
/// elsewhere.
pub fn scatter_rows<'g>(g: &'g Graph, x: Var<'g>, slots: &[usize], n: usize) -> Result<Var<'g>> {
    let d = x.shape()[1];
    let mut index = vec![0; n];
    for (k, &s) in slots.iter().enumerate() {
        index[s] = k + 1;
    }
    let padded = g.concat(&[g.input(Tensor::zeros(&[1, d])), x], 0)?;
    Ok(g.gather_rows(padded, &index)?)
}

/// Query and key row spans of one scene inside stacked token matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Group {
    pub q: (usize, usize),
    pub k: (usize, usize),
}

/// Single-head attention followed by a residual MLP update of the queries.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub mlp: Mlp,
    dropout: f64,
    layer_norm: bool,
    d_model: usize,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, config: &BackboneConfig, seed: u64) -> Result<Self> {
        let d = config.d_model;
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.wq"), d, d, false, seed)?,
            wk: Linear::new(store, &format!("{name}.wk"), d, d, false, seed)?,
            wv: Linear::new(store, &format!("{name}.wv"), d, d, false, seed)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[d, d, d], config.dropout, seed)?,
            dropout: config.dropout,
            layer_norm: config.layer_norm,
            d_model: d,
        })
    }

    pub fn param_count(config: &BackboneConfig) -> usize {
        let d = config.d_model;
        3 * d * d + Mlp::param_count(&[d, d, d])
    }

    fn update<'g>(&self, g: &'g Graph, store: &ParamStore, attended: Var<'g>) -> Result<Var<'g>> {
        let mut h = g.dropout(attended, self.dropout)?;
        if self.layer_norm {
            h = g.layer_norm(h);
        }
        Ok(self.mlp.forward(g, store, h)?)
    }

    /// Attention of each group's queries over its keys, on stacked rows.
    /// Groups must tile the query rows in order; a group without keys
    /// attends to nothing.
    pub fn forward_groups<'g>(&self, g: &'g Graph, store: &ParamStore, queries: Var<'g>, keys: Var<'g>, groups: &[Group]) -> Result<Var<'g>> {
        let q = self.wq.forward(g, store, queries)?;
        let k = self.wk.forward(g, store, keys)?;
        let v = self.wv.forward(g, store, keys)?;
        let n_keys = keys.shape()[0];
        let attended = if let [one] = groups {
            if one.k.1 == n_keys && one.k.1 > 0 {
                attention(g, q, k, v, None)?
            } else {
                self.group_attention(g, q, k, v, groups)?
            }
        } else {
            self.group_attention(g, q, k, v, groups)?
        };
        let delta = self.update(g, store, attended)?;
        Ok(g.residual_add(queries, delta)?)
    }

    fn group_attention<'g>(&self, g: &'g Graph, q: Var<'g>, k: Var<'g>, v: Var<'g>, groups: &[Group]) -> Result<Var<'g>> {
        let mut outs = Vec::with_capacity(groups.len());
        let mut next = 0;
        for grp in groups {
            if grp.q.0 != next {
                return Err(Error::Config(format!("query groups must tile rows; expected {next}, got {}", grp.q.0)));
            }
            next += grp.q.1;
            if grp.q.1 == 0 {
                continue;
            }
            let qs = g.slice_rows(q, grp.q.0, grp.q.1)?;
            outs.push(if grp.k.1 == 0 {
                g.input(Tensor::zeros(&[grp.q.1, self.d_model]))
            } else {
                let ks = g.slice_rows(k, grp.k.0, grp.k.1)?;
                let vs = g.slice_rows(v, grp.k.0, grp.k.1)?;
                attention(g, qs, ks, vs, None)?
            });
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            Ok(g.concat(&outs, 0)?)
        }
    }

    /// Reference path on padded tokens: attention is restricted to valid
    /// keys and padded query rows are left unchanged.
    pub fn forward_masked<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        queries: Var<'g>,
        keys: Var<'g>,
        key_mask: &[bool],
        query_mask: &[bool],
    ) -> Result<Var<'g>> {
        let q = self.wq.forward(g, store, queries)?;
        let k = self.wk.forward(g, store, keys)?;
        let v = self.wv.forward(g, store, keys)?;
        let attended = attention(g, q, k, v, Some(key_mask))?;
        let delta = self.update(g, store, attended)?;
        let d = self.d_model;
        let gate: Vec<f64> = query_mask
            .iter()
            .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, d))
            .collect();
        let gated = g.mul(delta, g.input(Tensor::new(&[query_mask.len(), d], gate)?))?;
        Ok(g.residual_add(queries, gated)?)
    }
}

/// Stacked subgraph tokens of a batch of scenes, before any attention.
#[derive(Clone)]
pub struct EmbeddedBatch<'g> {
    /// `[Σ valid agents, D]`, scene by scene, slot order.
    pub agent_tokens: Var<'g>,
    /// `[Σ valid lanes, D]`; `None` when no scene has a lane.
    pub map_tokens: Option<Var<'g>>,
    pub agent_spans: Vec<(usize, usize)>,
    pub map_spans: Vec<(usize, usize)>,
    /// Padded slot index of every stacked agent row, per scene.
    pub agent_slots: Vec<Vec<usize>>,
    pub map_slots: Vec<Vec<usize>>,
}

/// Final tokens of a batch, stacked like [`EmbeddedBatch`].
#[derive(Clone)]
pub struct EncodedBatch<'g> {
    pub agent_tokens: Var<'g>,
    pub map_tokens: Option<Var<'g>>,
    pub agent_spans: Vec<(usize, usize)>,
    pub map_spans: Vec<(usize, usize)>,
    pub agent_slots: Vec<Vec<usize>>,
    pub map_slots: Vec<Vec<usize>>,
}

impl<'g> EncodedBatch<'g> {
    /// Slot-0 (target agent) token of every scene, `[B, D]`.
    pub fn ego_tokens(&self, g: &'g Graph) -> Result<Var<'g>> {
        let rows: Vec<usize> = self.agent_spans.iter().map(|s| s.0).collect();
        Ok(g.gather_rows(self.agent_tokens, &rows)?)
    }

    /// Stacked map rows of the given `(scene, slot)` lanes.
    pub fn map_rows(&self, g: &'g Graph, lanes: &[(usize, usize)]) -> Result<Var<'g>> {
        let map = self.map_tokens.ok_or_else(|| Error::Data("batch has no lane tokens".into()))?;
        let rows = lanes
            .iter()
            .map(|&(s, slot)| {
                self.map_slots[s]
                    .iter()
                    .position(|&m| m == slot)
                    .map(|k| self.map_spans[s].0 + k)
                    .ok_or_else(|| Error::Data(format!("scene {s} lane slot {slot} is padding")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(g.gather_rows(map, &rows)?)
    }
}

/// Per-scene tokens in the padded layout.
pub struct TokenSet<'g> {
    /// `[N_a, D]`
    pub agent_tokens: Var<'g>,
    /// `[N_m, D]`
    pub map_tokens: Var<'g>,
    /// `[N_a + N_m, D]`, agents first.
    pub combined: Var<'g>,
    pub agent_mask: Vec<bool>,
    pub map_mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub features: FeatureConfig,
    pub agent_subgraph: SubgraphEncoder,
    pub map_subgraph: SubgraphEncoder,
    /// `(agent self-attention, agent-to-map attention)` per round.
    pub interleave: Vec<(AttentionBlock, AttentionBlock)>,
    pub alltoken: Vec<AttentionBlock>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, config: BackboneConfig, features: FeatureConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        features.validate()?;
        let agent_subgraph = SubgraphEncoder::new(store, "subgraph.agent", AGENT_FEATURE_DIM, &config, seed)?;
        let map_subgraph = SubgraphEncoder::new(store, "subgraph.map", MAP_FEATURE_DIM, &config, seed)?;
        let interleave = (0..config.n_interleave)
            .map(|i| {
                Ok((
                    AttentionBlock::new(store, &format!("interleave.{i}.self"), &config, seed)?,
                    AttentionBlock::new(store, &format!("interleave.{i}.cross"), &config, seed)?,
                ))
            })
            .collect::<Result<_>>()?;
        let alltoken = (0..config.m_alltoken)
            .map(|j| AttentionBlock::new(store, &format!("alltoken.{j}"), &config, seed))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            features,
            agent_subgraph,
            map_subgraph,
            interleave,
            alltoken,
        })
    }

    pub fn param_count(config: &BackboneConfig) -> usize {
        SubgraphEncoder::param_count(AGENT_FEATURE_DIM, config)
            + SubgraphEncoder::param_count(MAP_FEATURE_DIM, config)
            + (2 * config.n_interleave + config.m_alltoken) * AttentionBlock::param_count(config)
    }

    /// Prefixes of every backbone parameter name.
    pub fn is_backbone_param(name: &str) -> bool {
        ["subgraph.", "interleave.", "alltoken."].iter().any(|p| name.starts_with(p))
    }

    fn check_shapes(&self, agents: &AgentFeatureTensor, map: &MapFeatureTensor) -> Result<()> {
        let f = &self.features;
        let want_a = [f.n_agents, f.t_hist, AGENT_FEATURE_DIM];
        let want_m = [f.n_lanes, f.lane_segments, MAP_FEATURE_DIM];
        if agents.data.shape() != want_a || map.data.shape() != want_m {
            return Err(Error::Config(format!(
                "feature shapes {:?} / {:?}, backbone expects {want_a:?} / {want_m:?}",
                agents.data.shape(),
                map.data.shape()
            )));
        }
        if !agents.valid_mask.first().copied().unwrap_or(false) {
            return Err(Error::Data("agent slot 0 (target) is not valid".into()));
        }
        Ok(())
    }

    /// Subgraph tokens for a batch of `(agents, map)` inputs.
    pub fn embed<'g>(&self, g: &'g Graph, store: &ParamStore, inputs: &[(&AgentFeatureTensor, &MapFeatureTensor)]) -> Result<EmbeddedBatch<'g>> {
        if inputs.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut a_rows = Vec::new();
        let mut a_polys = Vec::new();
        let mut m_rows = Vec::new();
        let mut m_polys = Vec::new();
        let (mut agent_spans, mut map_spans) = (Vec::new(), Vec::new());
        let (mut agent_slots, mut map_slots) = (Vec::new(), Vec::new());
        for (agents, map) in inputs {
            self.check_shapes(agents, map)?;
            let (ar, ap) = stack_valid(&agents.data, &agents.valid_mask)?;
            let (mr, mp) = stack_valid(&map.data, &map.valid_mask)?;
            let (a_off, m_off) = (a_rows.len() / AGENT_FEATURE_DIM, m_rows.len() / MAP_FEATURE_DIM);
            agent_spans.push((a_polys.len(), ap.len()));
            map_spans.push((m_polys.len(), mp.len()));
            a_polys.extend(ap.iter().map(|&(s, l)| (s + a_off, l)));
            m_polys.extend(mp.iter().map(|&(s, l)| (s + m_off, l)));
            a_rows.extend_from_slice(ar.data());
            m_rows.extend_from_slice(mr.data());
            agent_slots.push((0..agents.valid_mask.len()).filter(|&i| agents.valid_mask[i]).collect());
            map_slots.push((0..map.valid_mask.len()).filter(|&i| map.valid_mask[i]).collect());
        }
        let a_in = Tensor::new(&[a_rows.len() / AGENT_FEATURE_DIM, AGENT_FEATURE_DIM], a_rows)?;
        let agent_tokens = self.agent_subgraph.forward(g, store, g.input(a_in), &a_polys)?;
        let map_tokens = if m_polys.is_empty() {
            None
        } else {
            let m_in = Tensor::new(&[m_rows.len() / MAP_FEATURE_DIM, MAP_FEATURE_DIM], m_rows)?;
            Some(self.map_subgraph.forward(g, store, g.input(m_in), &m_polys)?)
        };
        Ok(EmbeddedBatch {
            agent_tokens,
            map_tokens,
            agent_spans,
            map_spans,
            agent_slots,
            map_slots,
        })
    }

    /// Attention stages on embedded tokens.
    pub fn interact<'g>(&self, g: &'g Graph, store: &ParamStore, emb: EmbeddedBatch<'g>) -> Result<EncodedBatch<'g>> {
        let EmbeddedBatch {
            mut agent_tokens,
            map_tokens,
            agent_spans,
            map_spans,
            agent_slots,
            map_slots,
        } = emb;
        let self_groups: Vec<Group> = agent_spans.iter().map(|&a| Group { q: a, k: a }).collect();
        let cross_groups: Vec<Group> = agent_spans.iter().zip(&map_spans).map(|(&a, &m)| Group { q: a, k: m }).collect();
        let empty_map = g.input(Tensor::zeros(&[1, self.config.d_model]));
        for (self_block, cross_block) in &self.interleave {
            agent_tokens = self_block.forward_groups(g, store, agent_tokens, agent_tokens, &self_groups)?;
            agent_tokens = cross_block.forward_groups(g, store, agent_tokens, map_tokens.unwrap_or(empty_map), &cross_groups)?;
        }

        let n_agent_rows = agent_tokens.shape()[0];
        let stacked = match map_tokens {
            Some(m) => g.concat(&[agent_tokens, m], 0)?,
            None => agent_tokens,
        };
        let mut order = Vec::with_capacity(stacked.shape()[0]);
        let mut all_groups = Vec::with_capacity(agent_spans.len());
        for (&(a0, na), &(m0, nm)) in agent_spans.iter().zip(&map_spans) {
            let start = order.len();
            order.extend(a0..a0 + na);
            order.extend((m0..m0 + nm).map(|r| r + n_agent_rows));
            all_groups.push(Group {
                q: (start, na + nm),
                k: (start, na + nm),
            });
        }
        let mut combined = g.gather_rows(stacked, &order)?;
        for block in &self.alltoken {
            combined = block.forward_groups(g, store, combined, combined, &all_groups)?;
        }

        let mut a_rows = Vec::with_capacity(n_agent_rows);
        let mut m_rows = Vec::new();
        for (grp, (&(_, na), &(_, nm))) in all_groups.iter().zip(agent_spans.iter().zip(&map_spans)) {
            a_rows.extend(grp.q.0..grp.q.0 + na);
            m_rows.extend(grp.q.0 + na..grp.q.0 + na + nm);
        }
        Ok(EncodedBatch {
            agent_tokens: g.gather_rows(combined, &a_rows)?,
            map_tokens: if m_rows.is_empty() { None } else { Some(g.gather_rows(combined, &m_rows)?) },
            agent_spans,
            map_spans,
            agent_slots,
            map_slots,
        })
    }

    pub fn encode_batch<'g>(&self, g: &'g Graph, store: &ParamStore, inputs: &[(&AgentFeatureTensor, &MapFeatureTensor)]) -> Result<EncodedBatch<'g>> {
        let emb = self.embed(g, store, inputs)?;
        self.interact(g, store, emb)
    }

    /// Encodes one scene and returns tokens in the padded layout.
    pub fn encode_scene<'g>(&self, g: &'g Graph, store: &ParamStore, agents: &AgentFeatureTensor, map: &MapFeatureTensor) -> Result<TokenSet<'g>> {
        let enc = self.encode_batch(g, store, &[(agents, map)])?;
        let agent_tokens = scatter_rows(g, enc.agent_tokens, &enc.agent_slots[0], agents.valid_mask.len())?;
        let map_tokens = match enc.map_tokens {
            Some(m) => scatter_rows(g, m, &enc.map_slots[0], map.valid_mask.len())?,
            None => g.input(Tensor::zeros(&[map.valid_mask.len(), self.config.d_model])),
        };
        Ok(TokenSet {
            agent_tokens,
            map_tokens,
            combined: g.concat(&[agent_tokens, map_tokens], 0)?,
            agent_mask: agents.valid_mask.clone(),
            map_mask: map.valid_mask.clone(),
        })
    }

    /// Padded subgraph encoding of both token groups.
    pub fn subgraph_encode<'g>(&self, g: &'g Graph, store: &ParamStore, agents: &AgentFeatureTensor, map: &MapFeatureTensor) -> Result<(Var<'g>, Var<'g>)> {
        self.check_shapes(agents, map)?;
        Ok((
            self.agent_subgraph.encode_padded(g, store, &agents.data, &agents.valid_mask)?,
            self.map_subgraph.encode_padded(g, store, &map.data, &map.valid_mask)?,
        ))
    }

    pub fn agent_self_block<'g>(&self, round: usize, g: &'g Graph, store: &ParamStore, agents: Var<'g>, agent_mask: &[bool]) -> Result<Var<'g>> {
        self.interleave[round].0.forward_masked(g, store, agents, agents, agent_mask, agent_mask)
    }

    pub fn agent_map_block<'g>(
        &self,
        round: usize,
        g: &'g Graph,
        store: &ParamStore,
        agents: Var<'g>,
        map: Var<'g>,
        agent_mask: &[bool],
        map_mask: &[bool],
    ) -> Result<Var<'g>> {
        self.interleave[round].1.forward_masked(g, store, agents, map, map_mask, agent_mask)
    }

    pub fn all_token_block<'g>(&self, round: usize, g: &'g Graph, store: &ParamStore, combined: Var<'g>, mask: &[bool]) -> Result<Var<'g>> {
        self.alltoken[round].forward_masked(g, store, combined, combined, mask, mask)
    }

    /// The padded, masked composition of all blocks in encoder order.
    pub fn encode_scene_masked<'g>(&self, g: &'g Graph, store: &ParamStore, agents: &AgentFeatureTensor, map: &MapFeatureTensor) -> Result<TokenSet<'g>> {
        let (mut a, m) = self.subgraph_encode(g, store, agents, map)?;
        let (am, mm) = (&agents.valid_mask, &map.valid_mask);
        for i in 0..self.interleave.len() {
            a = self.agent_self_block(i, g, store, a, am)?;
            a = self.agent_map_block(i, g, store, a, m, am, mm)?;
        }
        let mut c = g.concat(&[a, m], 0)?;
        let cm: Vec<bool> = am.iter().chain(mm).copied().collect();
        for j in 0..self.alltoken.len() {
            c = self.all_token_block(j, g, store, c, &cm)?;
        }
        let (na, nm) = (am.len(), mm.len());
        Ok(TokenSet {
            agent_tokens: g.slice_rows(c, 0, na)?,
            map_tokens: g.slice_rows(c, na, nm)?,
            combined: c,
            agent_mask: am.clone(),
            map_mask: mm.clone(),
        })
    }
}
