//! Spatially enhanced causal Transformer.
//!
//! Item, region and distance tables all keep row 0 as padding. The item
//! table doubles as the output projection. Blocks are pre-norm with
//! residual connections, and the next-item distribution is read at the last
//! non-pad position.

mod loss;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Sequence;
use crate::math;
use crate::numerics::{cross_entropy_rows, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::{self, stream};
use crate::teacher::pad_column_mask;
use crate::{Error, Result};

pub use loss::{joint_loss, joint_loss_var, kd_loss, kd_loss_var, rec_loss, soften_logits, soften_probs};

/// How a teacher readout is combined with the student state when a fusion
/// variant runs the teacher at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Add,
    Cat,
    Multi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub seq_len: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub ln_eps: f64,
    pub fusion: Option<Fusion>,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self { dim: 256, heads: 2, layers: 2, seq_len: 128, dropout: 0.1, init_std: 0.02, ln_eps: 1e-6, fusion: None }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.layers == 0 || self.seq_len == 0 {
            return Err(Error::Config("student dim, heads, layers and seq_len must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.init_std > 0.0) || !(self.ln_eps > 0.0) {
            return Err(Error::Config("init_std and ln_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockIds {
    pub ln1: (ParamId, ParamId),
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2: (ParamId, ParamId),
    pub ffn1: (ParamId, ParamId),
    pub ffn2: (ParamId, ParamId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentIds {
    pub item: ParamId,
    pub region: ParamId,
    pub distance: ParamId,
    pub w_sp: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
    pub final_ln: (ParamId, ParamId),
    /// `(W [2d, d], b [d])` for concatenation fusion.
    pub fuse: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Student {
    pub config: StudentConfig,
    pub params: ParamStore,
    pub ids: StudentIds,
    num_items: usize,
    num_regions: usize,
    num_distances: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout masks derived from the seed.
    Train {
        seed: u64,
    },
}

/// Tape nodes of one forward pass over `B` sequences.
#[derive(Clone, Copy, Debug)]
pub struct StudentForward {
    /// `Ê_x`, `[B·n, d]`.
    pub embedded: Var,
    /// Final block output after normalisation, `[B·n, d]`.
    pub hidden: Var,
    /// Anchor rows `[B, d]`, after fusion when configured.
    pub anchor: Var,
    /// `[B, V+1]`.
    pub logits: Var,
}

/// Parameter groups touched by the spatial ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialPart {
    Region,
    Distance,
    Projection,
}

impl Student {
    /// `num_items`, `num_regions` and `num_distances` exclude padding.
    pub fn new(
        config: StudentConfig,
        num_items: usize,
        num_regions: usize,
        num_distances: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let std = config.init_std;
        let mut rng = rng::derived(seed, &[stream::INIT_STUDENT]);
        let mut p = ParamStore::new();
        let item = p.add_embedding("item", num_items + 1, d, std, &mut rng);
        let region = p.add_embedding("region", num_regions + 1, d, std, &mut rng);
        let distance = p.add_embedding("distance", num_distances + 1, d, std, &mut rng);
        let w_sp = p.add_normal("w_sp", &[d, d], std, &mut rng);
        let pos = p.add_normal("pos", &[config.seq_len, d], std, &mut rng);
        let ln = |p: &mut ParamStore, name: &str| {
            let g = p.add(format!("{name}.gain"), Tensor::new([d], vec![1.0; d]).expect("positive dim"));
            let b = p.add(format!("{name}.bias"), Tensor::zeros([d]));
            (g, b)
        };
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let ln1 = ln(&mut p, &format!("block{l}.ln1"));
            let wq = p.add_normal(format!("block{l}.wq"), &[d, d], std, &mut rng);
            let wk = p.add_normal(format!("block{l}.wk"), &[d, d], std, &mut rng);
            let wv = p.add_normal(format!("block{l}.wv"), &[d, d], std, &mut rng);
            let wo = p.add_normal(format!("block{l}.wo"), &[d, d], std, &mut rng);
            let bo = p.add(format!("block{l}.bo"), Tensor::zeros([d]));
            let ln2 = ln(&mut p, &format!("block{l}.ln2"));
            let w1 = p.add_normal(format!("block{l}.ffn1.w"), &[d, 4 * d], std, &mut rng);
            let b1 = p.add(format!("block{l}.ffn1.b"), Tensor::zeros([4 * d]));
            let w2 = p.add_normal(format!("block{l}.ffn2.w"), &[4 * d, d], std, &mut rng);
            let b2 = p.add(format!("block{l}.ffn2.b"), Tensor::zeros([d]));
            blocks.push(BlockIds { ln1, wq, wk, wv, wo, bo, ln2, ffn1: (w1, b1), ffn2: (w2, b2) });
        }
        let final_ln = ln(&mut p, "final_ln");
        let fuse = match config.fusion {
            Some(Fusion::Cat) => {
                let w = p.add_normal("fuse.w", &[2 * d, d], std, &mut rng);
                let b = p.add("fuse.b", Tensor::zeros([d]));
                Some((w, b))
            }
            _ => None,
        };
        Ok(Self {
            config,
            params: p,
            ids: StudentIds { item, region, distance, w_sp, pos, blocks, final_ln, fuse },
            num_items,
            num_regions,
            num_distances,
        })
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Zeroes and freezes one spatial parameter group.
    pub fn remove_spatial(&mut self, part: SpatialPart) {
        let id = match part {
            SpatialPart::Region => self.ids.region,
            SpatialPart::Distance => self.ids.distance,
            SpatialPart::Projection => self.ids.w_sp,
        };
        self.params.zero_and_freeze(id);
    }

    fn check_batch(&self, batch: &[&Sequence]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let n = self.config.seq_len;
        for (i, s) in batch.iter().enumerate() {
            let ok_len = s.items.len() == n && s.regions.len() == n && s.distances.len() == n;
            if !ok_len {
                return Err(Error::Config(format!("sequence length {} vs configured {n}", s.items.len())).in_sample(i));
            }
            let checks =
                [(&s.items, self.num_items), (&s.regions, self.num_regions), (&s.distances, self.num_distances)];
            for (ids, max) in checks {
                if let Some(&bad) = ids.iter().find(|&&x| x as usize > max) {
                    return Err(Error::Index { index: bad as usize, len: max + 1 }.in_sample(i));
                }
            }
            if s.anchor().is_none() {
                return Err(Error::InvalidSample("sequence has no real items".into()).in_sample(i));
            }
        }
        Ok(())
    }

    /// `E_SP = (E_{x_c} + E_{x_f}) · W_SP`, `[B·n, d]`.
    pub fn spatial_embedding(&self, tape: &mut Tape, batch: &[&Sequence]) -> Result<Var> {
        let region = tape.param(&self.params, self.ids.region);
        let distance = tape.param(&self.params, self.ids.distance);
        let w_sp = tape.param(&self.params, self.ids.w_sp);
        let c = tape.gather_rows(region, batch.iter().flat_map(|s| s.regions.iter().map(|&x| x as usize)).collect())?;
        let f =
            tape.gather_rows(distance, batch.iter().flat_map(|s| s.distances.iter().map(|&x| x as usize)).collect())?;
        let cf = tape.add(c, f)?;
        tape.matmul(cf, w_sp)
    }

    /// `Ê_x = E_x + E_SP + E_P`, dropout applied in training mode.
    pub fn embed(&self, tape: &mut Tape, batch: &[&Sequence], mode: Mode) -> Result<Var> {
        let n = self.config.seq_len;
        let item = tape.param(&self.params, self.ids.item);
        let pos = tape.param(&self.params, self.ids.pos);
        let e_x = tape.gather_rows(item, batch.iter().flat_map(|s| s.items.iter().map(|&x| x as usize)).collect())?;
        let sp = self.spatial_embedding(tape, batch)?;
        let e_p = tape.gather_rows(pos, (0..batch.len() * n).map(|i| i % n).collect())?;
        let h = tape.add(e_x, sp)?;
        let h = tape.add(h, e_p)?;
        self.dropout(tape, h, mode, 0)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, mode: Mode, site: u64) -> Result<Var> {
        let p = self.config.dropout;
        let Mode::Train { seed } = mode else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let mut rng = rng::derived(seed, &[stream::DROPOUT, site]);
        let keep = 1.0 / (1.0 - p);
        let mask = (0..tape.value(x).len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        tape.mul_const(x, mask)
    }

    /// Causal plus key-padding mask for `[B·K, n, n]` attention scores.
    fn attention_mask(&self, batch: &[&Sequence]) -> Vec<bool> {
        let n = self.config.seq_len;
        let k = self.config.heads;
        let mut mask = Vec::with_capacity(batch.len() * k * n * n);
        for s in batch {
            let mut one = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    one.push(j > i || s.items[j] == 0);
                }
            }
            for _ in 0..k {
                mask.extend_from_slice(&one);
            }
        }
        mask
    }

    /// One pre-norm block: attention then feed-forward, each residual.
    pub fn block(&self, tape: &mut Tape, h: Var, layer: usize, mask: &[bool], mode: Mode) -> Result<Var> {
        let ids = self.ids.blocks.get(layer).ok_or_else(|| Error::Config(format!("no block {layer}")))?;
        let n = self.config.seq_len;
        let d = self.config.dim;
        let k = self.config.heads;
        let rows = tape.value(h).rows();
        if rows % n != 0 || mask.len() != rows / n * k * n * n {
            return Err(Error::Config(format!("attention mask of {} for {rows} rows", mask.len())));
        }
        let bsz = rows / n;
        let p = |tape: &mut Tape, id| tape.param(&self.params, id);

        let (g1, b1) = (p(tape, ids.ln1.0), p(tape, ids.ln1.1));
        let x = tape.layer_norm(h, g1, b1, self.config.ln_eps)?;
        let mut heads = [x; 3];
        for (slot, w) in heads.iter_mut().zip([ids.wq, ids.wk, ids.wv]) {
            let w = p(tape, w);
            let y = tape.matmul(x, w)?;
            let y = tape.reshape(y, &[bsz, n, d])?;
            *slot = tape.split_heads(y, k)?;
        }
        let [q, kk, v] = heads;
        let scores = tape.bmm(q, kk, true)?;
        let scores = tape.scale(scores, 1.0 / math::sqrt((d / k) as f64));
        let att = tape.softmax(scores, 1.0, Some(mask))?;
        let ctx = tape.bmm(att, v, false)?;
        let ctx = tape.merge_heads(ctx, k)?;
        let ctx = tape.reshape(ctx, &[rows, d])?;
        let (wo, bo) = (p(tape, ids.wo), p(tape, ids.bo));
        let o = tape.matmul(ctx, wo)?;
        let o = tape.add_bias(o, bo)?;
        let o = self.dropout(tape, o, mode, 1 + 2 * layer as u64)?;
        let h = tape.add(h, o)?;

        let (g2, b2) = (p(tape, ids.ln2.0), p(tape, ids.ln2.1));
        let x = tape.layer_norm(h, g2, b2, self.config.ln_eps)?;
        let (w1, c1) = (p(tape, ids.ffn1.0), p(tape, ids.ffn1.1));
        let (w2, c2) = (p(tape, ids.ffn2.0), p(tape, ids.ffn2.1));
        let f = tape.matmul(x, w1)?;
        let f = tape.add_bias(f, c1)?;
        let f = tape.relu(f);
        let f = tape.matmul(f, w2)?;
        let f = tape.add_bias(f, c2)?;
        let f = self.dropout(tape, f, mode, 2 + 2 * layer as u64)?;
        tape.add(h, f)
    }

    /// Embedding and every block, `[B·n, d]`.
    pub fn encode(&self, tape: &mut Tape, batch: &[&Sequence], mode: Mode) -> Result<(Var, Var)> {
        self.check_batch(batch)?;
        let embedded = self.embed(tape, batch, mode)?;
        let mask = self.attention_mask(batch);
        let mut h = embedded;
        for l in 0..self.config.layers {
            h = self.block(tape, h, l, &mask, mode)?;
        }
        let (g, b) = self.ids.final_ln;
        let (g, b) = (tape.param(&self.params, g), tape.param(&self.params, b));
        let h = tape.layer_norm(h, g, b, self.config.ln_eps)?;
        Ok((embedded, h))
    }

    /// Full forward pass. `teacher_readout` (`[B, d]`, row-major) is required
    /// exactly when a fusion strategy is configured.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &[&Sequence],
        mode: Mode,
        teacher_readout: Option<&[f64]>,
    ) -> Result<StudentForward> {
        let n = self.config.seq_len;
        let d = self.config.dim;
        let (embedded, hidden) = self.encode(tape, batch, mode)?;
        let anchors = batch.iter().enumerate().map(|(b, s)| b * n + s.anchor().expect("checked")).collect();
        let mut anchor = tape.gather_rows(hidden, anchors)?;
        match (self.config.fusion, teacher_readout) {
            (None, None) => {}
            (Some(fusion), Some(r)) => {
                if r.len() != batch.len() * d {
                    return Err(Error::shape("fusion", format!("readout of {} for {} rows", r.len(), batch.len())));
                }
                let r = tape.constant(Tensor::new([batch.len(), d], r.to_vec())?);
                anchor = match fusion {
                    Fusion::Add => tape.add(anchor, r)?,
                    Fusion::Multi => tape.mul(anchor, r)?,
                    Fusion::Cat => {
                        let (w, b) = self.ids.fuse.expect("cat fusion has weights");
                        let (w, b) = (tape.param(&self.params, w), tape.param(&self.params, b));
                        let cat = tape.concat_cols(anchor, r)?;
                        let z = tape.matmul(cat, w)?;
                        tape.add_bias(z, b)?
                    }
                };
            }
            (Some(_), None) => return Err(Error::Config("fusion student needs a teacher readout".into())),
            (None, Some(_)) => return Err(Error::Config("teacher readout given to a plain student".into())),
        }
        let item = tape.param(&self.params, self.ids.item);
        let logits = tape.matmul_nt(anchor, item)?;
        Ok(StudentForward { embedded, hidden, anchor, logits })
    }

    /// `Ŷ_x`, `[B, V+1]` with zero padding mass.
    pub fn predict(&self, tape: &mut Tape, logits: Var) -> Result<Var> {
        let rows = tape.value(logits).rows();
        tape.softmax(logits, 1.0, Some(&pad_column_mask(rows, self.num_items + 1)))
    }

    /// Supervised, distillation and joint losses of one batch. `soft` holds
    /// teacher targets softened at `tau` (`[B, V+1]`); without it the
    /// distillation term is absent and the joint loss is the supervised one.
    pub fn losses(
        &self,
        tape: &mut Tape,
        batch: &[&Sequence],
        mode: Mode,
        soft: Option<&[f64]>,
        tau: f64,
        alpha: f64,
        teacher_readout: Option<&[f64]>,
    ) -> Result<Losses> {
        let fwd = self.forward(tape, batch, mode, teacher_readout)?;
        let probs = self.predict(tape, fwd.logits)?;
        let targets: Vec<usize> = batch.iter().map(|s| s.target as usize).collect();
        if let Some(i) = targets.iter().position(|&t| t == 0) {
            return Err(Error::invalid("target 0 is padding").in_sample(i));
        }
        let rec = cross_entropy_rows(tape, probs, &targets)?;
        let (kd, joint) = match soft {
            Some(p) => {
                let kd = kd_loss_var(tape, p, fwd.logits, tau)?;
                (Some(kd), joint_loss_var(tape, kd, rec, alpha)?)
            }
            None => (None, rec),
        };
        Ok(Losses { forward: fwd, probs, rec, kd, joint })
    }

    /// Scores (logits) for every item, `[B, V+1]` row-major, no dropout.
    pub fn scores(&self, batch: &[&Sequence], teacher_readout: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, batch, Mode::Eval, teacher_readout)?;
        Ok(tape.value(fwd.logits).data().to_vec())
    }

    /// Top-`k` `(item, probability)` pairs for one history given as parallel
    /// arrays of any length; the most recent `n` entries are used.
    pub fn top_k(&self, items: &[u32], regions: &[u32], distances: &[u32], k: usize) -> Result<Vec<(u32, f64)>> {
        if items.len() != regions.len() || items.len() != distances.len() {
            return Err(Error::invalid("items, regions and distances must align"));
        }
        let n = self.config.seq_len;
        let take = items.len().min(n);
        let pad = n - take;
        let window = |xs: &[u32]| {
            let mut v = vec![0; pad];
            v.extend_from_slice(&xs[xs.len() - take..]);
            v
        };
        let seq = Sequence {
            id: 0,
            user: 0,
            items: window(items),
            regions: window(regions),
            distances: window(distances),
            target: 0,
            split: crate::data::Split::Test,
        };
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, &[&seq], Mode::Eval, None)?;
        let probs = self.predict(&mut tape, fwd.logits)?;
        let p = tape.value(probs).data();
        let mut ranked: Vec<(u32, f64)> = (1..p.len()).map(|i| (i as u32, p[i])).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        Ok(ranked)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub forward: StudentForward,
    pub probs: Var,
    pub rec: Var,
    pub kd: Option<Var>,
    pub joint: Var,
}
