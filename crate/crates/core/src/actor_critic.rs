//! Actor and critic networks built on the transformer stack.
//!
//! The actor projects an equivariant vector per limb onto the limb's joint axes
//! and squashes the three inner products with `tanh`. The critic averages a
//! linear read of each limb's value matrix. Actor and critic share no weights.

use rand::Rng;

use crate::encoding::{GeometricState, Z_COLS};
use crate::error::{Error, Result};
use crate::nn::{Affine, Bound, Mlp, ParamId, ParamStore};
use crate::set::{edge_logit_bias, frame_columns, SetStack, StackInput, StackOutput};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::variants::{encode_batch, EncodedBatch, ModelSpec, Variant};

pub const ACTION_DIM: usize = 3;

/// Equivariant readout: `T_i = [U_i, frame]·R(M_i)·w`, then `a_i = tanh(axesᵀ T_i)`.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub mix_u: ParamId,
    pub readout: Mlp,
    pub w_t: ParamId,
    side: usize,
}

#[derive(Clone, Debug)]
pub enum ActionHead {
    Projection(ProjectionHead),
    Linear(Affine),
}

#[derive(Clone, Debug)]
pub struct ActorNet {
    pub variant: Variant,
    pub stack: SetStack,
    pub head: ActionHead,
}

#[derive(Clone, Debug)]
pub struct ActorOutput {
    /// `[G·V × 3]` squashed actions.
    pub actions: Var,
    pub stack: StackOutput,
}

/// Puts a batch's constant inputs on the tape.
fn stack_input(tape: &mut Tape, stack: &SetStack, batch: &EncodedBatch, raw_h: Var) -> Result<StackInput> {
    let z = if stack.layout.equivariant {
        Some(tape.constant(vec![batch.rows() * 3, Z_COLS], batch.z.clone())?)
    } else {
        None
    };
    let frame = frame_columns(tape, stack.layout, batch.gravity, &batch.targets, batch.limbs)?;
    let logit_bias = if stack.cfg.edge_bias != 0.0 && !batch.edges.is_empty() {
        Some(edge_logit_bias(tape, &batch.edges, batch.graphs, stack.cfg.heads, batch.limbs, stack.cfg.edge_bias)?)
    } else {
        None
    };
    Ok(StackInput { graphs: batch.graphs, limbs: batch.limbs, z, raw_h, frame, logit_bias })
}

impl ActorNet {
    pub fn new(store: &mut ParamStore, name: &str, spec: &ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        let cfg = &spec.cfg;
        let kind = spec.variant.kind;
        let layout = kind.layout();
        let stack = SetStack::new(store, name, cfg, layout, kind.scalar_width(), rng)?;
        let head = if kind.linear_action() {
            ActionHead::Linear(Affine::new(store, &format!("{name}.w_pi"), cfg.matrix_len(), ACTION_DIM, 1.0, rng))
        } else {
            let side = cfg.c_u + layout.frame_cols();
            ActionHead::Projection(ProjectionHead {
                mix_u: store.glorot(format!("{name}.head.w_u"), Z_COLS, cfg.c_u, 1.0, rng),
                readout: Mlp::new(store, &format!("{name}.head.sigma_M"), &[cfg.matrix_len(), cfg.matrix_hidden, side * side], rng),
                w_t: store.glorot(format!("{name}.head.w_t"), side, 1, 0.1, rng),
                side,
            })
        };
        Ok(Self { variant: spec.variant, stack, head })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &EncodedBatch) -> Result<ActorOutput> {
        let raw_h = tape.constant(vec![batch.rows(), batch.scalar_width], batch.scalars.clone())?;
        let input = stack_input(tape, &self.stack, batch, raw_h)?;
        let out = self.stack.forward(tape, p, &input)?;
        let n = batch.rows();
        let pre = match &self.head {
            ActionHead::Linear(aff) => aff.apply(tape, p, out.m)?,
            ActionHead::Projection(head) => {
                let z = out.z.ok_or_else(|| Error::Contract("projection head needs a vector stream".into()))?;
                let u = tape.matmul(z, p[head.mix_u])?;
                let stacked = match input.frame {
                    Some(f) => tape.concat_cols(&[u, f])?,
                    None => u,
                };
                let r = head.readout.apply(tape, p, out.m)?;
                let r = tape.reshape(r, vec![n * head.side, head.side])?;
                let r = tape.matmul(r, p[head.w_t])?;
                let r = tape.reshape(r, vec![n, head.side])?;
                let t = tape.block_matvec(stacked, r, 3)?;
                let t = tape.reshape(t, vec![n, 3])?;
                let axes = tape.constant(vec![n * 3, 3], batch.axes.clone())?;
                let proj = tape.block_matvec(axes, t, 3)?;
                tape.reshape(proj, vec![n, ACTION_DIM])?
            }
        };
        Ok(ActorOutput { actions: tape.tanh(pre)?, stack: out })
    }
}

#[derive(Clone, Debug)]
pub struct CriticNet {
    pub stack: SetStack,
    pub head: Affine,
}

impl CriticNet {
    pub fn new(store: &mut ParamStore, name: &str, spec: &ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        let kind = spec.variant.kind;
        let stack = SetStack::new(store, name, &spec.cfg, kind.layout(), kind.scalar_width() + ACTION_DIM, rng)?;
        let head = Affine::new(store, &format!("{name}.w_q"), spec.cfg.matrix_len(), 1, 1.0, rng);
        Ok(Self { stack, head })
    }

    /// `Q` per graph, `[G × 1]`. The torso's action column is masked out.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &EncodedBatch, actions: Var) -> Result<(Var, StackOutput)> {
        let shape = tape.value(actions).shape().to_vec();
        if shape != [batch.rows(), ACTION_DIM] {
            return Err(Error::Contract(format!(
                "critic expects actions of shape [{}, {ACTION_DIM}], got {shape:?}",
                batch.rows()
            )));
        }
        let mask = torso_mask(tape, batch.graphs, batch.limbs)?;
        let masked = tape.mul(actions, mask)?;
        let scalars = tape.constant(vec![batch.rows(), batch.scalar_width], batch.scalars.clone())?;
        let raw_h = tape.concat_cols(&[scalars, masked])?;
        let input = stack_input(tape, &self.stack, batch, raw_h)?;
        let out = self.stack.forward(tape, p, &input)?;
        let per_limb = self.head.apply(tape, p, out.m)?;
        Ok((tape.group_mean(per_limb, batch.limbs)?, out))
    }
}

fn torso_mask(tape: &mut Tape, graphs: usize, limbs: usize) -> Result<Var> {
    let mut data = vec![1.0; graphs * limbs * ACTION_DIM];
    for g in 0..graphs {
        data[g * limbs * ACTION_DIM..][..ACTION_DIM].fill(0.0);
    }
    tape.constant(vec![graphs * limbs, ACTION_DIM], data)
}

/// Actor network with its parameters.
#[derive(Clone, Debug)]
pub struct Actor {
    pub net: ActorNet,
    pub params: ParamStore,
}

impl Actor {
    pub fn new(spec: &ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = ActorNet::new(&mut params, "actor", spec, rng)?;
        Ok(Self { net, params })
    }

    pub fn variant(&self) -> Variant {
        self.net.variant
    }

    pub fn encode(&self, states: &[&GeometricState]) -> Result<EncodedBatch> {
        encode_batch(&self.net.variant, states)
    }

    /// Actions for a batch, `[G·V × 3]` row-major.
    pub fn act_encoded(&self, batch: &EncodedBatch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let out = self.net.forward(&mut tape, &p, batch)?;
        Ok(tape.data(out.actions).to_vec())
    }

    /// Per-limb actions, torso first.
    pub fn act(&self, state: &GeometricState) -> Result<Vec<[f64; 3]>> {
        let flat = self.act_encoded(&self.encode(&[state])?)?;
        Ok(flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }
}

/// One or more critic networks sharing a parameter store.
#[derive(Clone, Debug)]
pub struct Critic {
    pub variant: Variant,
    pub nets: Vec<CriticNet>,
    pub params: ParamStore,
}

impl Critic {
    pub fn new(spec: &ModelSpec, count: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let nets = (0..count)
            .map(|i| CriticNet::new(&mut params, &format!("critic{}", i + 1), spec, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { variant: spec.variant, nets, params })
    }

    /// `Q` of every network for one state and its per-limb actions.
    pub fn q_values(&self, state: &GeometricState, actions: &[[f64; 3]]) -> Result<Vec<f64>> {
        let batch = encode_batch(&self.variant, &[state])?;
        if actions.len() != batch.limbs {
            return Err(Error::Contract(format!("{} actions for {} limbs", actions.len(), batch.limbs)));
        }
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let a = tape.leaf(Tensor::new(vec![batch.limbs, ACTION_DIM], actions.concat())?);
        self.nets
            .iter()
            .map(|net| {
                let (q, _) = net.forward(&mut tape, &p, &batch, a)?;
                tape.value(q).item()
            })
            .collect()
    }
}
