//! Subequivariant transformer stack.
//!
//! Batches hold `G` graphs of `V` limbs each. Vector features are stored as
//! `[G·V·3 × c]` (three coordinate rows per limb), scalar features as
//! `[G·V × c]`. A rotation acts on each 3-row block, so anything computed
//! from Gram matrices of those blocks is unaffected by it.

use rand::Rng;

use crate::encoding::Z_COLS;
use crate::error::{Error, Result};
use crate::nn::{Affine, Bound, Mlp, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SetConfig {
    pub layers: usize,
    pub heads: usize,
    /// Width of the embedded scalar stream.
    pub width: usize,
    /// Query/key width summed over heads; also the value width.
    pub qk_width: usize,
    /// Recorded for completeness; no parameter currently consumes it.
    pub attn_hidden: usize,
    /// Side of the square value matrix.
    pub matrix_side: usize,
    pub matrix_hidden: usize,
    /// Vector channels mixed into the Gram stack.
    pub c_m: usize,
    /// Vector channels mixed into the update and readout stacks.
    pub c_u: usize,
    /// Additive attention logit for adjacent limbs; 0 disables it.
    pub edge_bias: f64,
}

impl Default for SetConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 2,
            width: 128,
            qk_width: 128,
            attn_hidden: 256,
            matrix_side: 32,
            matrix_hidden: 512,
            c_m: 30,
            c_u: 14,
            edge_bias: 0.0,
        }
    }
}

impl SetConfig {
    /// Small network that trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            layers: 1,
            heads: 2,
            width: 16,
            qk_width: 8,
            attn_hidden: 16,
            matrix_side: 3,
            matrix_hidden: 16,
            c_m: 3,
            c_u: 3,
            edge_bias: 0.0,
        }
    }

    /// Random small shape, used by property checks.
    pub fn sample_small(rng: &mut impl Rng) -> Self {
        let heads = rng.random_range(1..=3);
        Self {
            layers: rng.random_range(1..=3),
            heads,
            width: rng.random_range(3..=8),
            qk_width: heads * rng.random_range(1..=3),
            attn_hidden: 8,
            matrix_side: rng.random_range(2..=4),
            matrix_hidden: rng.random_range(3..=8),
            c_m: rng.random_range(1..=4),
            c_u: rng.random_range(1..=4),
            edge_bias: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("heads", self.heads),
            ("width", self.width),
            ("qk_width", self.qk_width),
            ("matrix_side", self.matrix_side),
            ("matrix_hidden", self.matrix_hidden),
            ("c_m", self.c_m),
            ("c_u", self.c_u),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Contract(format!("{name} must be positive")));
        }
        if !self.qk_width.is_multiple_of(self.heads) {
            return Err(Error::Contract(format!(
                "{} heads do not divide query/key width {}",
                self.heads, self.qk_width
            )));
        }
        if !self.edge_bias.is_finite() {
            return Err(Error::Contract("edge bias must be finite".into()));
        }
        Ok(())
    }

    pub fn matrix_len(&self) -> usize {
        self.matrix_side * self.matrix_side
    }
}

/// Which directions join the learned vector channels, and whether a vector
/// stream exists at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamLayout {
    pub gravity_column: bool,
    pub target_column: bool,
    pub equivariant: bool,
}

impl StreamLayout {
    pub const FULL: StreamLayout = StreamLayout { gravity_column: true, target_column: true, equivariant: true };

    pub fn frame_cols(&self) -> usize {
        usize::from(self.gravity_column) + usize::from(self.target_column)
    }
}

/// Value-matrix block: vector mix, Gram, two MLPs.
#[derive(Clone, Debug)]
pub struct GramBlock {
    mix: Option<ParamId>,
    sigma_m: Option<Mlp>,
    sigma_big: Mlp,
}

impl GramBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &SetConfig, layout: StreamLayout, rng: &mut impl Rng) -> Self {
        let mm = cfg.matrix_len();
        if layout.equivariant {
            let stacked = cfg.c_m + layout.frame_cols();
            let mix = store.glorot(format!("{name}.w_m"), Z_COLS, cfg.c_m, 1.0, rng);
            let sigma_m = Mlp::new(store, &format!("{name}.sigma_m"), &[stacked * stacked, cfg.matrix_hidden, mm], rng);
            let sigma_big = Mlp::new(store, &format!("{name}.sigma_M"), &[mm + cfg.width, cfg.matrix_hidden, mm], rng);
            Self { mix: Some(mix), sigma_m: Some(sigma_m), sigma_big }
        } else {
            let sigma_big = Mlp::new(store, &format!("{name}.sigma_M"), &[cfg.width, cfg.matrix_hidden, mm], rng);
            Self { mix: None, sigma_m: None, sigma_big }
        }
    }

    /// Flattened Gram matrices of `[Z·W_m, frame]`, one row per limb.
    pub fn gram_features(&self, tape: &mut Tape, p: &Bound, z: Var, frame: Option<Var>) -> Result<Var> {
        let mix = self.mix.ok_or_else(|| Error::Contract("block has no vector stream".into()))?;
        let mixed = tape.matmul(z, p[mix])?;
        let stacked = match frame {
            Some(f) => tape.concat_cols(&[mixed, f])?,
            None => mixed,
        };
        tape.gram(stacked, 3)
    }

    /// Value matrices `[N × m²]`.
    pub fn apply(&self, tape: &mut Tape, p: &Bound, z: Option<Var>, frame: Option<Var>, h: Var) -> Result<Var> {
        let x = match (&self.sigma_m, z) {
            (Some(sigma_m), Some(z)) => {
                let s = self.gram_features(tape, p, z, frame)?;
                let e = sigma_m.apply(tape, p, s)?;
                tape.concat_cols(&[e, h])?
            }
            (None, _) => h,
            (Some(_), None) => return Err(Error::Contract("vector input missing".into())),
        };
        self.sigma_big.apply(tape, p, x)
    }
}

#[derive(Clone, Debug)]
pub struct SetLayer {
    pub gram: GramBlock,
    query: Affine,
    key: Affine,
    value: Affine,
    mix_u: Option<ParamId>,
    w_z: Option<ParamId>,
    w_h: Affine,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

/// Everything computed by one layer, for inspection.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    pub z: Option<Var>,
    pub h: Var,
    pub m: Var,
    /// `[G·H·V × V]`; absent for the readout block.
    pub alpha: Option<Var>,
    pub query: Option<Var>,
    pub key: Option<Var>,
    pub value: Option<Var>,
}

impl SetLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &SetConfig, layout: StreamLayout, rng: &mut impl Rng) -> Self {
        let mm = cfg.matrix_len();
        let gram = GramBlock::new(store, name, cfg, layout, rng);
        let query = Affine::new(store, &format!("{name}.w_q"), mm, cfg.qk_width, 1.0, rng);
        let key = Affine::new(store, &format!("{name}.w_k"), mm, cfg.qk_width, 1.0, rng);
        let value = Affine::new(store, &format!("{name}.w_v"), mm, cfg.qk_width, 1.0, rng);
        let (mix_u, w_z) = if layout.equivariant {
            let stacked = cfg.c_u + layout.frame_cols();
            (
                Some(store.glorot(format!("{name}.w_u"), Z_COLS, cfg.c_u, 1.0, rng)),
                Some(store.glorot(format!("{name}.w_z"), stacked, Z_COLS, 0.1, rng)),
            )
        } else {
            (None, None)
        };
        let w_h = Affine::new(store, &format!("{name}.w_h"), cfg.qk_width, cfg.width, 1.0, rng);
        let ln_gain = store.filled(format!("{name}.ln.gain"), &[cfg.width], 1.0);
        let ln_bias = store.zeros(format!("{name}.ln.bias"), &[cfg.width]);
        Self { gram, query, key, value, mix_u, w_z, w_h, ln_gain, ln_bias }
    }

    pub fn w_z(&self) -> Option<ParamId> {
        self.w_z
    }

    pub fn w_h(&self) -> Affine {
        self.w_h
    }

    /// Per-head attention `[G·H·V × V]` from value matrices `[G·V × m²]`.
    pub fn attention(&self, tape: &mut Tape, p: &Bound, m: Var, heads: usize, limbs: usize, logit_bias: Option<Var>) -> Result<(Var, Var, Var)> {
        let q = self.query.apply(tape, p, m)?;
        let k = self.key.apply(tape, p, m)?;
        let mut logits = tape.attn_logits(q, k, heads, limbs)?;
        if let Some(b) = logit_bias {
            logits = tape.add(logits, b)?;
        }
        Ok((tape.softmax_rows(logits)?, q, k))
    }

    /// Applies the layer given its value matrices and attention.
    #[allow(clippy::too_many_arguments)]
    pub fn update(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: Option<Var>,
        h: Var,
        m: Var,
        alpha: Var,
        frame: Option<Var>,
        heads: usize,
        limbs: usize,
    ) -> Result<(Option<Var>, Var, Var)> {
        let v = self.value.apply(tape, p, m)?;
        let agg = tape.attn_apply(alpha, v, heads, limbs, 1)?;
        let upd = self.w_h.apply(tape, p, agg)?;
        let pre = tape.add(h, upd)?;
        let h_next = tape.layer_norm_rows(pre, p[self.ln_gain], p[self.ln_bias])?;
        let z_next = match (z, self.mix_u, self.w_z) {
            (Some(z), Some(mix_u), Some(w_z)) => {
                let u = tape.matmul(z, p[mix_u])?;
                let stacked = match frame {
                    Some(f) => tape.concat_cols(&[u, f])?,
                    None => u,
                };
                let mean_alpha = tape.head_mean(alpha, heads, limbs)?;
                let pooled = tape.attn_apply(mean_alpha, stacked, 1, limbs, 3)?;
                let dz = tape.matmul(pooled, p[w_z])?;
                Some(tape.add(z, dz)?)
            }
            _ => None,
        };
        Ok((z_next, h_next, v))
    }
}

/// Inputs to one batched stack evaluation, already on the tape.
#[derive(Clone, Copy, Debug)]
pub struct StackInput {
    pub graphs: usize,
    pub limbs: usize,
    /// `[G·V·3 × 6]`, absent for scalar-only stacks.
    pub z: Option<Var>,
    /// `[G·V × raw_width]`.
    pub raw_h: Var,
    /// `[G·V·3 × frame_cols]`, absent when no direction joins the stacks.
    pub frame: Option<Var>,
    pub logit_bias: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct StackOutput {
    pub z: Option<Var>,
    pub h: Var,
    /// Readout value matrices `[G·V × m²]`.
    pub m: Var,
    /// Entries `0..L` are the layers; entry `L` is the readout.
    pub trace: Vec<LayerTrace>,
}

#[derive(Clone, Debug)]
pub struct SetStack {
    pub cfg: SetConfig,
    pub layout: StreamLayout,
    pub raw_width: usize,
    encoder: Affine,
    pub layers: Vec<SetLayer>,
    pub readout: GramBlock,
}

impl SetStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &SetConfig,
        layout: StreamLayout,
        raw_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let encoder = Affine::new(store, &format!("{name}.encoder"), raw_width, cfg.width, 1.0, rng);
        let layers = (0..cfg.layers)
            .map(|l| SetLayer::new(store, &format!("{name}.layer{l}"), cfg, layout, rng))
            .collect();
        let readout = GramBlock::new(store, &format!("{name}.readout"), cfg, layout, rng);
        Ok(Self { cfg: cfg.clone(), layout, raw_width, encoder, layers, readout })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, input: &StackInput) -> Result<StackOutput> {
        let raw = tape.value(input.raw_h);
        if raw.cols() != self.raw_width || raw.rows() != input.graphs * input.limbs {
            return Err(Error::Contract(format!(
                "scalar input {:?} does not match {} graphs of {} limbs with width {}",
                raw.shape(),
                input.graphs,
                input.limbs,
                self.raw_width
            )));
        }
        if self.layout.equivariant != input.z.is_some() {
            return Err(Error::Contract("vector input presence does not match the stack".into()));
        }
        let (heads, limbs) = (self.cfg.heads, input.limbs);
        let mut z = input.z;
        let mut h = self.encoder.apply(tape, p, input.raw_h)?;
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        for layer in &self.layers {
            let m = layer.gram.apply(tape, p, z, input.frame, h)?;
            let (alpha, q, k) = layer.attention(tape, p, m, heads, limbs, input.logit_bias)?;
            let (z_next, h_next, v) = layer.update(tape, p, z, h, m, alpha, input.frame, heads, limbs)?;
            trace.push(LayerTrace { z, h, m, alpha: Some(alpha), query: Some(q), key: Some(k), value: Some(v) });
            z = z_next;
            h = h_next;
        }
        let m = self.readout.apply(tape, p, z, input.frame, h)?;
        trace.push(LayerTrace { z, h, m, alpha: None, query: None, key: None, value: None });
        Ok(StackOutput { z, h, m, trace })
    }
}

/// Constant `[G·V·3 × k]` columns holding gravity and/or each graph's target
/// direction, per the layout.
pub fn frame_columns(
    tape: &mut Tape,
    layout: StreamLayout,
    gravity: [f64; 3],
    targets: &[[f64; 3]],
    limbs: usize,
) -> Result<Option<Var>> {
    let k = layout.frame_cols();
    if k == 0 || !layout.equivariant {
        return Ok(None);
    }
    let mut data = Vec::with_capacity(targets.len() * limbs * 3 * k);
    for d in targets {
        for _ in 0..limbs {
            for r in 0..3 {
                if layout.gravity_column {
                    data.push(gravity[r]);
                }
                if layout.target_column {
                    data.push(d[r]);
                }
            }
        }
    }
    Ok(Some(tape.constant(vec![targets.len() * limbs * 3, k], data)?))
}

/// Constant logit bias `[G·H·V × V]` adding `value` for adjacent limbs.
pub fn edge_logit_bias(
    tape: &mut Tape,
    edges: &[(usize, usize)],
    graphs: usize,
    heads: usize,
    limbs: usize,
    value: f64,
) -> Result<Var> {
    let mut one = vec![0.0; limbs * limbs];
    for &(a, b) in edges {
        let (a, b) = (a - 1, b - 1);
        one[a * limbs + b] = value;
        one[b * limbs + a] = value;
    }
    let data = one.repeat(graphs * heads);
    tape.constant(vec![graphs * heads * limbs, limbs], data)
}

/// Reads a `[N × c]` tape value back as rows.
pub fn rows_of(tape: &Tape, v: Var) -> Vec<Vec<f64>> {
    let t: &Tensor = tape.value(v);
    t.data().chunks(t.cols()).map(<[f64]>::to_vec).collect()
}
