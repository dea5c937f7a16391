use super::params::ParamVector;
use super::tensor::{gemm, MatRef, Tensor};
use crate::error::{Error, Result};

/// Slot index inside a [`ComputationRecord`].
pub type Slot = usize;

/// The closed primitive set understood by the engine.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Reads a parameter segment as a value.
    Param { segment: String },
    /// `x · Wᵀ + b` with `W: out × in` and `b: out`.
    Affine {
        input: Slot,
        weight: String,
        bias: Option<String>,
    },
    Relu { input: Slot },
    /// `masks · x` with `masks: n × |V|` and `x: |V| × d`; rows of `masks`
    /// select which items are summed for each subset.
    SumPool { masks: Slot, input: Slot },
    Add { lhs: Slot, rhs: Slot },
    Mul { lhs: Slot, rhs: Slot },
    /// Sum of every entry, producing shape `[1]`.
    ReduceSum { input: Slot },
}

impl Op {
    fn operands(&self) -> Vec<Slot> {
        match self {
            Op::Param { .. } => vec![],
            Op::Affine { input, .. } | Op::Relu { input } | Op::ReduceSum { input } => {
                vec![*input]
            }
            Op::SumPool { masks, input } => vec![*masks, *input],
            Op::Add { lhs, rhs } | Op::Mul { lhs, rhs } => vec![*lhs, *rhs],
        }
    }
}

/// Declared layout of one record input. `cols = None` accepts any width.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSpec {
    pub name: String,
    pub rank: usize,
    pub cols: Option<usize>,
}

/// A topologically ordered straight-line program. Inputs occupy slots
/// `0..inputs.len()`, op `i` writes slot `inputs.len() + i`, and the last op
/// is the output.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputationRecord {
    inputs: Vec<InputSpec>,
    ops: Vec<Op>,
}

/// Incremental builder that hands out slots in write order, which makes
/// every record it produces topologically ordered by construction.
#[derive(Debug, Default)]
pub struct RecordBuilder {
    inputs: Vec<InputSpec>,
    ops: Vec<Op>,
}

impl RecordBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, name: &str, rank: usize, cols: Option<usize>) -> Slot {
        assert!(self.ops.is_empty(), "inputs must be declared before ops");
        self.inputs.push(InputSpec {
            name: name.to_string(),
            rank,
            cols,
        });
        self.inputs.len() - 1
    }

    pub fn push(&mut self, op: Op) -> Slot {
        self.ops.push(op);
        self.inputs.len() + self.ops.len() - 1
    }

    pub fn param(&mut self, segment: &str) -> Slot {
        self.push(Op::Param {
            segment: segment.to_string(),
        })
    }

    pub fn affine(&mut self, input: Slot, weight: &str, bias: Option<&str>) -> Slot {
        self.push(Op::Affine {
            input,
            weight: weight.to_string(),
            bias: bias.map(str::to_string),
        })
    }

    pub fn relu(&mut self, input: Slot) -> Slot {
        self.push(Op::Relu { input })
    }

    pub fn sum_pool(&mut self, masks: Slot, input: Slot) -> Slot {
        self.push(Op::SumPool { masks, input })
    }

    pub fn add(&mut self, lhs: Slot, rhs: Slot) -> Slot {
        self.push(Op::Add { lhs, rhs })
    }

    pub fn mul(&mut self, lhs: Slot, rhs: Slot) -> Slot {
        self.push(Op::Mul { lhs, rhs })
    }

    pub fn reduce_sum(&mut self, input: Slot) -> Slot {
        self.push(Op::ReduceSum { input })
    }

    pub fn build(self) -> Result<ComputationRecord> {
        ComputationRecord::new(self.inputs, self.ops)
    }
}

impl ComputationRecord {
    /// Validates that every op only reads slots written before it.
    pub fn new(inputs: Vec<InputSpec>, ops: Vec<Op>) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::invalid("record has no ops"));
        }
        for (i, op) in ops.iter().enumerate() {
            let slot = inputs.len() + i;
            if let Some(bad) = op.operands().into_iter().find(|&s| s >= slot) {
                return Err(Error::invalid(format!(
                    "op {i} reads slot {bad} before it is written"
                )));
            }
        }
        Ok(Self { inputs, ops })
    }

    pub fn inputs(&self) -> &[InputSpec] {
        &self.inputs
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    fn n_slots(&self) -> usize {
        self.inputs.len() + self.ops.len()
    }

    fn check_inputs(&self, inputs: &[&Tensor]) -> Result<()> {
        if inputs.len() != self.inputs.len() {
            return Err(Error::shape(format!(
                "record expects {} inputs, got {}",
                self.inputs.len(),
                inputs.len()
            )));
        }
        for (spec, t) in self.inputs.iter().zip(inputs) {
            if t.shape().len() != spec.rank {
                return Err(Error::shape(format!(
                    "input `{}` expects rank {}, got shape {:?}",
                    spec.name,
                    spec.rank,
                    t.shape()
                )));
            }
            if let Some(c) = spec.cols {
                if t.cols() != c {
                    return Err(Error::shape(format!(
                        "input `{}` expects {} columns, got {}",
                        spec.name,
                        c,
                        t.cols()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Which slots carry a dependence on parameters.
    fn param_dependent(&self) -> Vec<bool> {
        let mut dep = vec![false; self.n_slots()];
        for (i, op) in self.ops.iter().enumerate() {
            let slot = self.inputs.len() + i;
            dep[slot] = match op {
                Op::Param { .. } | Op::Affine { .. } => true,
                other => other.operands().iter().any(|&s| dep[s]),
            };
        }
        dep
    }
}

fn segment<'p>(params: &'p ParamVector, name: &str) -> Result<&'p Tensor> {
    params
        .get(name)
        .ok_or_else(|| Error::invalid(format!("unknown parameter segment `{name}`")))
}

fn eval_op(op: &Op, slots: &[Tensor], params: &ParamVector) -> Result<Tensor> {
    let out = match op {
        Op::Param { segment: name } => segment(params, name)?.clone(),
        Op::Affine {
            input,
            weight,
            bias,
        } => {
            let x = &slots[*input];
            let w = segment(params, weight)?;
            if w.shape().len() != 2 || w.cols() != x.cols() {
                return Err(Error::shape(format!(
                    "affine `{weight}`: weight {:?} incompatible with input {:?}",
                    w.shape(),
                    x.shape()
                )));
            }
            let (n, d_in, d_out) = (x.rows(), x.cols(), w.rows());
            let mut out = vec![0.0; n * d_out];
            if let Some(b) = bias {
                let b = segment(params, b)?;
                if b.len() != d_out {
                    return Err(Error::shape(format!(
                        "affine bias has {} entries, expected {d_out}",
                        b.len()
                    )));
                }
                for row in out.chunks_mut(d_out) {
                    row.copy_from_slice(b.data());
                }
            }
            let beta = if bias.is_some() { 1.0 } else { 0.0 };
            gemm(
                n,
                d_in,
                d_out,
                1.0,
                MatRef::row_major(x.data(), d_in),
                MatRef::transposed(w.data(), d_in),
                beta,
                &mut out,
            );
            let shape = if x.shape().len() == 1 {
                vec![d_out]
            } else {
                vec![n, d_out]
            };
            Tensor::from_parts(shape, out)
        }
        Op::Relu { input } => {
            let x = &slots[*input];
            let data = x.data().iter().map(|&v| v.max(0.0)).collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Op::SumPool { masks, input } => {
            let m = &slots[*masks];
            let x = &slots[*input];
            if m.cols() != x.rows() {
                return Err(Error::shape(format!(
                    "sum-pool: masks have {} columns but input has {} rows",
                    m.cols(),
                    x.rows()
                )));
            }
            let (n, v, d) = (m.rows(), m.cols(), x.cols());
            let mut out = vec![0.0; n * d];
            gemm(
                n,
                v,
                d,
                1.0,
                MatRef::row_major(m.data(), v),
                MatRef::row_major(x.data(), d),
                0.0,
                &mut out,
            );
            Tensor::from_parts(vec![n, d], out)
        }
        Op::Add { lhs, rhs } | Op::Mul { lhs, rhs } => {
            let (a, b) = (&slots[*lhs], &slots[*rhs]);
            if a.shape() != b.shape() {
                return Err(Error::shape(format!(
                    "elementwise op on {:?} and {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let add = matches!(op, Op::Add { .. });
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| if add { x + y } else { x * y })
                .collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        Op::ReduceSum { input } => Tensor::from_parts(vec![1], vec![slots[*input].data().iter().sum()]),
    };
    if !out.all_finite() {
        return Err(Error::NonFinite(format!("intermediate produced by {op:?}")));
    }
    Ok(out)
}

/// Evaluates `record` and returns its output.
pub fn forward_eval(
    record: &ComputationRecord,
    params: &ParamVector,
    inputs: &[&Tensor],
) -> Result<Tensor> {
    let mut tape = Tape::record(record, params, inputs)?;
    Ok(tape.slots.pop().expect("record has at least one op"))
}

/// Returns `∇_θ ⟨cotangent, output⟩`.
pub fn param_vjp(
    record: &ComputationRecord,
    params: &ParamVector,
    inputs: &[&Tensor],
    cotangent: &Tensor,
) -> Result<ParamVector> {
    Tape::record(record, params, inputs)?.param_vjp(cotangent)
}

/// Forward pass with every slot value retained for a later reverse sweep.
#[derive(Debug)]
pub struct Tape<'a> {
    record: &'a ComputationRecord,
    params: &'a ParamVector,
    slots: Vec<Tensor>,
}

impl<'a> Tape<'a> {
    pub fn record(
        record: &'a ComputationRecord,
        params: &'a ParamVector,
        inputs: &[&Tensor],
    ) -> Result<Self> {
        record.check_inputs(inputs)?;
        let mut slots: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
        for op in &record.ops {
            let value = eval_op(op, &slots, params)?;
            slots.push(value);
        }
        Ok(Self {
            record,
            params,
            slots,
        })
    }

    pub fn output(&self) -> &Tensor {
        self.slots.last().expect("record has at least one op")
    }

    /// Bytes held by the retained slot values.
    pub fn retained_bytes(&self) -> usize {
        self.slots
            .iter()
            .map(|t| t.len() * std::mem::size_of::<f64>())
            .sum()
    }

    /// Reverse sweep accumulating parameter gradients of `⟨cotangent, output⟩`.
    pub fn param_vjp(&self, cotangent: &Tensor) -> Result<ParamVector> {
        let out = self.output();
        if cotangent.shape() != out.shape() {
            return Err(Error::shape(format!(
                "cotangent shape {:?} does not match output {:?}",
                cotangent.shape(),
                out.shape()
            )));
        }
        let record = self.record;
        let params = self.params;
        let dep = record.param_dependent();
        let n_in = record.inputs.len();
        let mut grads = params.zeros_like();
        let mut cot: Vec<Option<Tensor>> = vec![None; self.slots.len()];
        cot[self.slots.len() - 1] = Some(cotangent.clone());

        for (i, op) in record.ops.iter().enumerate().rev() {
            let slot = n_in + i;
            let Some(dy) = cot[slot].take() else { continue };
            match op {
                Op::Param { segment: name } => {
                    let idx = params.index_of(name).expect("validated in forward");
                    add_into(grads.segment_mut(idx).data_mut(), dy.data());
                }
                Op::Affine {
                    input,
                    weight,
                    bias,
                } => {
                    let x = &self.slots[*input];
                    let w = segment(params, weight)?;
                    let (n, d_in, d_out) = (x.rows(), x.cols(), w.rows());
                    let widx = params.index_of(weight).expect("validated in forward");
                    // dW += dYᵀ · X
                    gemm(
                        d_out,
                        n,
                        d_in,
                        1.0,
                        MatRef::transposed(dy.data(), d_out),
                        MatRef::row_major(x.data(), d_in),
                        1.0,
                        grads.segment_mut(widx).data_mut(),
                    );
                    if let Some(b) = bias {
                        let bidx = params.index_of(b).expect("validated in forward");
                        let db = grads.segment_mut(bidx).data_mut();
                        for row in dy.data().chunks(d_out) {
                            add_into(db, row);
                        }
                    }
                    if dep[*input] {
                        let mut dx = vec![0.0; n * d_in];
                        gemm(
                            n,
                            d_out,
                            d_in,
                            1.0,
                            MatRef::row_major(dy.data(), d_out),
                            MatRef::row_major(w.data(), d_in),
                            0.0,
                            &mut dx,
                        );
                        accumulate(&mut cot, *input, Tensor::from_parts(x.shape().to_vec(), dx));
                    }
                }
                Op::Relu { input } => {
                    if dep[*input] {
                        let x = &self.slots[*input];
                        let dx = dy
                            .data()
                            .iter()
                            .zip(x.data())
                            .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                            .collect();
                        accumulate(&mut cot, *input, Tensor::from_parts(x.shape().to_vec(), dx));
                    }
                }
                Op::SumPool { masks, input } => {
                    if dep[*masks] {
                        return Err(Error::invalid(
                            "sum-pool masks must not depend on parameters",
                        ));
                    }
                    if dep[*input] {
                        let m = &self.slots[*masks];
                        let x = &self.slots[*input];
                        let (n, v, d) = (m.rows(), m.cols(), x.cols());
                        let mut dx = vec![0.0; v * d];
                        gemm(
                            v,
                            n,
                            d,
                            1.0,
                            MatRef::transposed(m.data(), v),
                            MatRef::row_major(dy.data(), d),
                            0.0,
                            &mut dx,
                        );
                        accumulate(&mut cot, *input, Tensor::from_parts(x.shape().to_vec(), dx));
                    }
                }
                Op::Add { lhs, rhs } => {
                    if dep[*lhs] {
                        accumulate(&mut cot, *lhs, dy.clone());
                    }
                    if dep[*rhs] {
                        accumulate(&mut cot, *rhs, dy);
                    }
                }
                Op::Mul { lhs, rhs } => {
                    let (a, b) = (&self.slots[*lhs], &self.slots[*rhs]);
                    if dep[*lhs] {
                        let da = dy.data().iter().zip(b.data()).map(|(g, y)| g * y).collect();
                        accumulate(&mut cot, *lhs, Tensor::from_parts(a.shape().to_vec(), da));
                    }
                    if dep[*rhs] {
                        let db = dy.data().iter().zip(a.data()).map(|(g, x)| g * x).collect();
                        accumulate(&mut cot, *rhs, Tensor::from_parts(b.shape().to_vec(), db));
                    }
                }
                Op::ReduceSum { input } => {
                    if dep[*input] {
                        let x = &self.slots[*input];
                        let g = dy.data()[0];
                        accumulate(
                            &mut cot,
                            *input,
                            Tensor::from_parts(x.shape().to_vec(), vec![g; x.len()]),
                        );
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate(cot: &mut [Option<Tensor>], slot: Slot, value: Tensor) {
    match &mut cot[slot] {
        Some(existing) => add_into(existing.data_mut(), value.data()),
        empty => *empty = Some(value),
    }
}
