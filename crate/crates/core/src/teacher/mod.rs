//! Graph teacher: relation-aware message passing over sampled subgraphs,
//! a user gate, and an additive-attention readout scored against the
//! takeaway rows of the entity table.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::data::Sequence;
use crate::numerics::{cross_entropy_rows, Csr, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::{self, stream};
use crate::stkg::{sample_subgraph, Stkg, Subgraph};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub dim: usize,
    /// Sequence length `n`; the gate holds one weight row per position.
    pub seq_len: usize,
    pub layers: usize,
    pub fanouts: Vec<usize>,
    pub embedding_std: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { dim: 256, seq_len: 128, layers: 2, fanouts: vec![10, 10], embedding_std: 0.1 }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.seq_len == 0 || self.layers == 0 {
            return Err(Error::Config("teacher dim, seq_len and layers must be positive".into()));
        }
        if self.fanouts.is_empty() || self.fanouts.contains(&0) {
            return Err(Error::Config(format!("invalid fanouts {:?}", self.fanouts)));
        }
        if !(self.embedding_std > 0.0) {
            return Err(Error::Config("embedding_std must be positive".into()));
        }
        Ok(())
    }
}

/// Counts graph work so callers can prove a code path never touched it.
#[derive(Debug, Default)]
pub struct Probe {
    gnn_samples: AtomicU64,
    subgraphs: AtomicU64,
}

impl Probe {
    /// Samples pushed through the message-passing layers.
    pub fn gnn_samples(&self) -> u64 {
        self.gnn_samples.load(Ordering::Relaxed)
    }

    pub fn subgraphs(&self) -> u64 {
        self.subgraphs.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.gnn_samples.store(0, Ordering::Relaxed);
        self.subgraphs.store(0, Ordering::Relaxed);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherIds {
    pub entity: ParamId,
    pub relation: ParamId,
    /// `(W [2d, d], b [d])` per layer.
    pub combine: Vec<(ParamId, ParamId)>,
    pub gate_w1: ParamId,
    pub gate_w2: ParamId,
    pub att_w: ParamId,
    pub att_v: ParamId,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Teacher {
    pub config: TeacherConfig,
    pub params: ParamStore,
    pub ids: TeacherIds,
    num_takeaways: usize,
    #[serde(skip)]
    probe: Probe,
}

impl Clone for Teacher {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            ids: self.ids.clone(),
            num_takeaways: self.num_takeaways,
            probe: Probe::default(),
        }
    }
}

/// Tape nodes of one teacher forward pass over a batch of `B` samples.
#[derive(Clone, Copy, Debug)]
pub struct TeacherForward {
    /// `[B·n, d]`, padding rows zero.
    pub h_x: Var,
    /// `[B, d]`.
    pub h_u: Var,
    /// `[B·n, d]`.
    pub gated: Var,
    /// Attention readout `[B, d]`.
    pub readout: Var,
    /// `[B, V+1]`; column 0 is padding.
    pub logits: Var,
    /// Soft labels `[B, V+1]` with zero padding mass.
    pub probs: Var,
}

fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    crate::math::sqrt(2.0 / (fan_in + fan_out) as f64)
}

impl Teacher {
    pub fn new(config: TeacherConfig, graph: &Stkg, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut rng = rng::derived(seed, &[stream::INIT_TEACHER]);
        let mut p = ParamStore::new();
        let entity = p.add_embedding("entity", graph.num_entities(), d, config.embedding_std, &mut rng);
        let relation = p.add_normal("relation", &[graph.num_relations(), d], config.embedding_std, &mut rng);
        let mut combine = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let w = p.add_normal(format!("combine{l}.w"), &[2 * d, d], xavier(2 * d, d), &mut rng);
            let b = p.add(format!("combine{l}.b"), Tensor::zeros([d]));
            combine.push((w, b));
        }
        let gate_w1 = p.add_normal("gate.w1", &[d, 1], xavier(d, 1), &mut rng);
        let gate_w2 = p.add_normal("gate.w2", &[config.seq_len, d], xavier(d, 1), &mut rng);
        let att_w = p.add_normal("att.w", &[d, d], xavier(d, d), &mut rng);
        let att_v = p.add_normal("att.v", &[d, 1], xavier(d, 1), &mut rng);
        Ok(Self {
            config,
            params: p,
            ids: TeacherIds { entity, relation, combine, gate_w1, gate_w2, att_w, att_v },
            num_takeaways: graph.num_takeaways(),
            probe: Probe::default(),
        })
    }

    pub fn num_takeaways(&self) -> usize {
        self.num_takeaways
    }

    pub fn probe(&self) -> &Probe {
        &self.probe
    }

    /// Samples the subgraph of a sequence with the configured fanouts.
    pub fn sample(&self, seq: &Sequence, graph: &Stkg, seed: u64) -> Result<Subgraph> {
        self.probe.subgraphs.fetch_add(1, Ordering::Relaxed);
        sample_subgraph(seq, graph, &self.config.fanouts, seed)
    }

    /// Message passing: returns `H_x [B·n, d]` (padding rows zero) and
    /// `H_u [B, d]`.
    pub fn gnn_forward(&self, tape: &mut Tape, batch: &[Subgraph]) -> Result<(Var, Var)> {
        let n = self.config.seq_len;
        let d = self.config.dim;
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for (i, sg) in batch.iter().enumerate() {
            if sg.centers.len() != n {
                return Err(Error::Config(format!("subgraph {i} has {} centers, expected {n}", sg.centers.len())));
            }
        }
        self.probe.gnn_samples.fetch_add(batch.len() as u64, Ordering::Relaxed);
        let num_relations = self.params.value(self.ids.relation).rows();

        // neighbourhoods per (sample, entity), deduplicated and sorted
        let mut nbrs: BTreeMap<(usize, u32), Vec<(u32, u32)>> = BTreeMap::new();
        for (b, sg) in batch.iter().enumerate() {
            for e in sg.edges() {
                nbrs.entry((b, e.parent)).or_default().push((e.relation, e.child));
            }
        }
        for l in nbrs.values_mut() {
            l.sort_unstable();
            l.dedup();
        }

        // node sets per layer, each a prefix of the one below
        let layers = self.config.layers;
        let mut nodes: Vec<Vec<(usize, u32)>> = vec![Vec::new(); layers + 1];
        let mut index: Vec<BTreeMap<(usize, u32), usize>> = vec![BTreeMap::new(); layers + 1];
        for (b, sg) in batch.iter().enumerate() {
            for &c in sg.centers.iter().filter(|&&c| c != 0).chain(core::iter::once(&sg.user_node)) {
                if !index[layers].contains_key(&(b, c)) {
                    index[layers].insert((b, c), nodes[layers].len());
                    nodes[layers].push((b, c));
                }
            }
        }
        for l in (0..layers).rev() {
            let mut list = nodes[l + 1].clone();
            let mut idx = index[l + 1].clone();
            for &(b, v) in &nodes[l + 1] {
                for &(_, c) in nbrs.get(&(b, v)).map(Vec::as_slice).unwrap_or(&[]) {
                    if let alloc::collections::btree_map::Entry::Vacant(e) = idx.entry((b, c)) {
                        e.insert(list.len());
                        list.push((b, c));
                    }
                }
            }
            nodes[l] = list;
            index[l] = idx;
        }

        let entity = tape.param(&self.params, self.ids.entity);
        let relation = tape.param(&self.params, self.ids.relation);
        let mut h = tape.gather_rows(entity, nodes[0].iter().map(|&(_, e)| e as usize).collect())?;
        for l in 1..=layers {
            let mut node_rows = Vec::with_capacity(nodes[l].len());
            let mut rel_rows = Vec::with_capacity(nodes[l].len());
            for key in &nodes[l] {
                let list = nbrs.get(key).map(Vec::as_slice).unwrap_or(&[]);
                let w = if list.is_empty() { 0.0 } else { 1.0 / list.len() as f64 };
                node_rows.push(list.iter().map(|&(_, c)| (index[l - 1][&(key.0, c)], w)).collect());
                rel_rows.push(list.iter().map(|&(r, _)| (r as usize, w)).collect());
            }
            let a = Csr::from_rows(nodes[l - 1].len(), &node_rows)?;
            let ar = Csr::from_rows(num_relations, &rel_rows)?;
            let m_nodes = tape.spmm(a, h)?;
            let m_rel = tape.spmm(ar, relation)?;
            let m = tape.add(m_nodes, m_rel)?;
            let own = tape.gather_rows(h, (0..nodes[l].len()).collect())?;
            let cat = tape.concat_cols(m, own)?;
            let (w, bias) = self.ids.combine[l - 1];
            let w = tape.param(&self.params, w);
            let bias = tape.param(&self.params, bias);
            let z = tape.matmul(cat, w)?;
            let z = tape.add_bias(z, bias)?;
            h = tape.relu(z);
        }

        let top = &index[layers];
        let mut rows = Vec::with_capacity(batch.len() * n);
        let mut keep = Vec::with_capacity(batch.len() * n * d);
        for (b, sg) in batch.iter().enumerate() {
            for &c in &sg.centers {
                let real = c != 0;
                rows.push(if real { top[&(b, c)] } else { 0 });
                keep.extend(core::iter::repeat(if real { 1.0 } else { 0.0 }).take(d));
            }
        }
        let h_x = tape.gather_rows(h, rows)?;
        let h_x = tape.mul_const(h_x, keep)?;
        let users = batch.iter().enumerate().map(|(b, sg)| top[&(b, sg.user_node)]).collect();
        let h_u = tape.gather_rows(h, users)?;
        Ok((h_x, h_u))
    }

    /// `H'_x = H_x ⊗ σ(H_x·W₁ + W₂·H_uᵀ)` with the gate broadcast over
    /// columns.
    pub fn user_gate(&self, tape: &mut Tape, h_x: Var, h_u: Var) -> Result<Var> {
        let n = self.config.seq_len;
        let bsz = tape.value(h_u).rows();
        if tape.value(h_x).rows() != bsz * n {
            return Err(Error::Config(format!(
                "gate expects {} sequence rows, got {}",
                bsz * n,
                tape.value(h_x).rows()
            )));
        }
        let w1 = tape.param(&self.params, self.ids.gate_w1);
        let w2 = tape.param(&self.params, self.ids.gate_w2);
        let a = tape.matmul(h_x, w1)?;
        let c = tape.matmul_nt(h_u, w2)?;
        let c = tape.reshape(c, &[bsz * n, 1])?;
        let s = tape.add(a, c)?;
        let g = tape.sigmoid(s);
        tape.mul_col(h_x, g)
    }

    /// Additive attention over non-pad positions: `[B·n, d] -> [B, d]`.
    pub fn readout(&self, tape: &mut Tape, gated: Var, pad_mask: &[bool]) -> Result<Var> {
        let n = self.config.seq_len;
        let d = self.config.dim;
        let rows = tape.value(gated).rows();
        if pad_mask.len() != rows || rows % n != 0 {
            return Err(Error::Config(format!("pad mask of {} for {rows} rows", pad_mask.len())));
        }
        let bsz = rows / n;
        for b in 0..bsz {
            if pad_mask[b * n..(b + 1) * n].iter().all(|&p| p) {
                return Err(Error::InvalidSample("sequence has no real items".into()).in_sample(b));
            }
        }
        let w = tape.param(&self.params, self.ids.att_w);
        let v = tape.param(&self.params, self.ids.att_v);
        let z = tape.matmul(gated, w)?;
        let z = tape.tanh(z);
        let s = tape.matmul(z, v)?;
        let s = tape.reshape(s, &[bsz, n])?;
        let alpha = tape.softmax(s, 1.0, Some(pad_mask))?;
        let alpha = tape.reshape(alpha, &[bsz, 1, n])?;
        let hs = tape.reshape(gated, &[bsz, n, d])?;
        let r = tape.bmm(alpha, hs, false)?;
        tape.reshape(r, &[bsz, d])
    }

    /// Scores of a readout against every takeaway row, `[B, V+1]`.
    pub fn logits(&self, tape: &mut Tape, readout: Var) -> Result<Var> {
        let entity = tape.param(&self.params, self.ids.entity);
        let items = tape.gather_rows(entity, (0..=self.num_takeaways).collect())?;
        tape.matmul_nt(readout, items)
    }

    pub fn forward(&self, tape: &mut Tape, batch: &[Subgraph]) -> Result<TeacherForward> {
        let (h_x, h_u) = self.gnn_forward(tape, batch)?;
        let gated = self.user_gate(tape, h_x, h_u)?;
        let pad: Vec<bool> = batch.iter().flat_map(|sg| sg.centers.iter().map(|&c| c == 0)).collect();
        let readout = self.readout(tape, gated, &pad)?;
        let logits = self.logits(tape, readout)?;
        let probs = tape.softmax(logits, 1.0, Some(&pad_column_mask(batch.len(), self.num_takeaways + 1)))?;
        Ok(TeacherForward { h_x, h_u, gated, readout, logits, probs })
    }

    /// Mean cross-entropy of the soft labels against the targets.
    pub fn pretrain_loss(&self, tape: &mut Tape, batch: &[Subgraph], targets: &[u32]) -> Result<(Var, TeacherForward)> {
        if targets.len() != batch.len() {
            return Err(Error::invalid("one target per subgraph required"));
        }
        for (i, &t) in targets.iter().enumerate() {
            if t == 0 || t as usize > self.num_takeaways {
                return Err(Error::Index { index: t as usize, len: self.num_takeaways + 1 }.in_sample(i));
            }
        }
        let out = self.forward(tape, batch)?;
        let idx: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        let loss = cross_entropy_rows(tape, out.probs, &idx)?;
        Ok((loss, out))
    }

    /// Soft labels and logits without gradient bookkeeping.
    pub fn infer(&self, batch: &[Subgraph]) -> Result<TeacherOutput> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch)?;
        Ok(TeacherOutput {
            width: self.num_takeaways + 1,
            logits: tape.value(out.logits).data().to_vec(),
            probs: tape.value(out.probs).data().to_vec(),
            readout: tape.value(out.readout).data().to_vec(),
        })
    }
}

/// Row-major `[B, V+1]` teacher results.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutput {
    pub width: usize,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub readout: Vec<f64>,
}

/// Mask excluding column 0 of every row.
pub fn pad_column_mask(rows: usize, width: usize) -> Vec<bool> {
    let mut m = vec![false; rows * width];
    for r in 0..rows {
        m[r * width] = true;
    }
    m
}
