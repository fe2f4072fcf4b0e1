//! Computational-graph IR: equations over tensor primitives in topological
//! order, an evaluator, a FLOP/peak-memory cost model, and a textual
//! pretty-printer.
//!
//! Graphs are immutable once handed out; `eval` may run concurrently on the
//! same graph with different bindings. Both forward losses and gradient
//! programs are ordinary `Graph` values.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{element_count, ElemOp, Tensor, TensorError};

/// Opaque handle for a value defined by a graph input or equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub u32);

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

/// What a graph input means to differentiation and batching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Parameter,
    Data,
    Constant,
}

#[derive(Debug, Clone)]
pub struct GraphInput {
    pub id: VarId,
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    /// For data inputs: the axis indexing examples.
    pub batch_axis: Option<usize>,
}

/// One primitive operation.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Contract { pairs: Vec<(usize, usize)> },
    Elementwise { op: ElemOp },
    ReduceSum { axes: Vec<usize> },
    Broadcast { shape: Vec<usize>, mapping: Vec<usize> },
    Transpose { perm: Vec<usize> },
    Literal { value: Tensor },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Contract { .. } => "contract",
            Primitive::Elementwise { op } => op.name(),
            Primitive::ReduceSum { .. } => "reduce_sum",
            Primitive::Broadcast { .. } => "broadcast",
            Primitive::Transpose { .. } => "transpose",
            Primitive::Literal { .. } => "literal",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Primitive::Contract { .. } => 2,
            Primitive::Elementwise { op } => op.arity(),
            Primitive::Literal { .. } => 0,
            _ => 1,
        }
    }

    /// Shape rule for this primitive given input shapes.
    pub fn infer_shape(&self, ins: &[&[usize]]) -> std::result::Result<Vec<usize>, TensorError> {
        match self {
            Primitive::Contract { pairs } => {
                let (a, b) = (ins[0], ins[1]);
                check_axis_list(a.len(), pairs.iter().map(|p| p.0), "contract lhs pairs")?;
                check_axis_list(b.len(), pairs.iter().map(|p| p.1), "contract rhs pairs")?;
                for &(la, ra) in pairs {
                    if a[la] != b[ra] {
                        return Err(TensorError::ContractExtentMismatch {
                            lhs_axis: la,
                            lhs_extent: a[la],
                            rhs_axis: ra,
                            rhs_extent: b[ra],
                        });
                    }
                }
                let mut out: Vec<usize> = (0..a.len())
                    .filter(|ax| !pairs.iter().any(|p| p.0 == *ax))
                    .map(|ax| a[ax])
                    .collect();
                out.extend(
                    (0..b.len())
                        .filter(|ax| !pairs.iter().any(|p| p.1 == *ax))
                        .map(|ax| b[ax]),
                );
                Ok(out)
            }
            Primitive::Elementwise { op } => match op.arity() {
                1 => Ok(ins[0].to_vec()),
                _ => {
                    let (a, b) = (ins[0], ins[1]);
                    if a == b {
                        Ok(a.to_vec())
                    } else if a.is_empty() {
                        Ok(b.to_vec())
                    } else if b.is_empty() {
                        Ok(a.to_vec())
                    } else {
                        Err(TensorError::ShapeMismatch {
                            lhs: a.to_vec(),
                            rhs: b.to_vec(),
                        })
                    }
                }
            },
            Primitive::ReduceSum { axes } => {
                let a = ins[0];
                check_axis_list(a.len(), axes.iter().copied(), "reduce_sum axes")?;
                Ok((0..a.len())
                    .filter(|ax| !axes.contains(ax))
                    .map(|ax| a[ax])
                    .collect())
            }
            Primitive::Broadcast { shape, mapping } => {
                let a = ins[0];
                let bad = || TensorError::BroadcastMismatch {
                    from: a.to_vec(),
                    to: shape.clone(),
                    mapping: mapping.clone(),
                };
                if mapping.len() != a.len() {
                    return Err(bad());
                }
                let mut seen = vec![false; shape.len()];
                for (i, &t) in mapping.iter().enumerate() {
                    if t >= shape.len() || seen[t] || shape[t] != a[i] {
                        return Err(bad());
                    }
                    seen[t] = true;
                }
                Ok(shape.clone())
            }
            Primitive::Transpose { perm } => {
                let a = ins[0];
                if perm.len() != a.len() {
                    return Err(TensorError::InvalidPermutation {
                        perm: perm.clone(),
                        rank: a.len(),
                    });
                }
                let mut seen = vec![false; a.len()];
                for &p in perm {
                    if p >= a.len() || seen[p] {
                        return Err(TensorError::InvalidPermutation {
                            perm: perm.clone(),
                            rank: a.len(),
                        });
                    }
                    seen[p] = true;
                }
                Ok(perm.iter().map(|&p| a[p]).collect())
            }
            Primitive::Literal { value } => Ok(value.shape().to_vec()),
        }
    }
}

fn check_axis_list(
    rank: usize,
    axes: impl Iterator<Item = usize>,
    context: &'static str,
) -> std::result::Result<(), TensorError> {
    let mut seen = vec![false; rank];
    for axis in axes {
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        if seen[axis] {
            return Err(TensorError::DuplicateAxis { axis, context });
        }
        seen[axis] = true;
    }
    Ok(())
}

/// Marks an equation as the final batch reduction producing a parameter's
/// summed gradient. `operand_batch_axes[i]` is the batch axis of input `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchReduceTag {
    pub param: VarId,
    pub operand_batch_axes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Equation {
    pub output: VarId,
    pub primitive: Primitive,
    pub inputs: Vec<VarId>,
    pub out_shape: Vec<usize>,
    pub batch_reduce: Option<BatchReduceTag>,
}

/// Per-equation cost entry.
#[derive(Debug, Clone)]
pub struct EquationCost {
    pub var: VarId,
    pub flops: u64,
    pub output_size: u64,
}

/// Cost model output: FLOPs under standard conventions, and the peak number
/// of scalar slots simultaneously live under the written topological
/// schedule with free-after-last-use liveness. Parameters and graph outputs
/// stay live for the whole program.
#[derive(Debug, Clone)]
pub struct CostReport {
    pub total_flops: u64,
    pub peak_live_values: u64,
    pub per_equation: Vec<EquationCost>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    pub(crate) inputs: Vec<GraphInput>,
    pub(crate) equations: Vec<Equation>,
    pub(crate) outputs: Vec<VarId>,
    pub(crate) next_id: u32,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn inputs(&self) -> &[GraphInput] {
        &self.inputs
    }

    pub fn equations(&self) -> &[Equation] {
        &self.equations
    }

    pub fn outputs(&self) -> &[VarId] {
        &self.outputs
    }

    pub(crate) fn fresh_var(&mut self) -> VarId {
        let id = VarId(self.next_id);
        self.next_id += 1;
        id
    }

    pub fn input(
        &mut self,
        name: &str,
        shape: &[usize],
        role: Role,
        batch_axis: Option<usize>,
    ) -> VarId {
        let id = self.fresh_var();
        self.inputs.push(GraphInput {
            id,
            name: name.to_string(),
            shape: shape.to_vec(),
            role,
            batch_axis,
        });
        id
    }

    pub fn parameter(&mut self, name: &str, shape: &[usize]) -> VarId {
        self.input(name, shape, Role::Parameter, None)
    }

    pub fn data(&mut self, name: &str, shape: &[usize], batch_axis: usize) -> VarId {
        self.input(name, shape, Role::Data, Some(batch_axis))
    }

    pub(crate) fn push(
        &mut self,
        primitive: Primitive,
        inputs: Vec<VarId>,
        tag: Option<BatchReduceTag>,
    ) -> Result<VarId> {
        assert_eq!(primitive.arity(), inputs.len(), "primitive arity");
        let mut shapes = Vec::with_capacity(inputs.len());
        for v in &inputs {
            shapes.push(self.shape_of(*v)?);
        }
        let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let out_shape = primitive.infer_shape(&shape_refs)?;
        let output = self.fresh_var();
        self.equations.push(Equation {
            output,
            primitive,
            inputs,
            out_shape,
            batch_reduce: tag,
        });
        Ok(output)
    }

    pub fn literal(&mut self, value: Tensor) -> VarId {
        self.push(Primitive::Literal { value }, vec![], None)
            .expect("literal is total")
    }

    pub fn scalar(&mut self, value: f64) -> VarId {
        self.literal(Tensor::scalar(value))
    }

    pub fn contract(&mut self, a: VarId, b: VarId, pairs: &[(usize, usize)]) -> Result<VarId> {
        self.push(
            Primitive::Contract {
                pairs: pairs.to_vec(),
            },
            vec![a, b],
            None,
        )
    }

    pub fn unary(&mut self, op: ElemOp, a: VarId) -> Result<VarId> {
        self.push(Primitive::Elementwise { op }, vec![a], None)
    }

    pub fn binary(&mut self, op: ElemOp, a: VarId, b: VarId) -> Result<VarId> {
        self.push(Primitive::Elementwise { op }, vec![a, b], None)
    }

    pub fn reduce_sum(&mut self, a: VarId, axes: &[usize]) -> Result<VarId> {
        self.push(
            Primitive::ReduceSum {
                axes: axes.to_vec(),
            },
            vec![a],
            None,
        )
    }

    pub fn broadcast(&mut self, a: VarId, shape: &[usize], mapping: &[usize]) -> Result<VarId> {
        self.push(
            Primitive::Broadcast {
                shape: shape.to_vec(),
                mapping: mapping.to_vec(),
            },
            vec![a],
            None,
        )
    }

    pub fn transpose(&mut self, a: VarId, perm: &[usize]) -> Result<VarId> {
        self.push(
            Primitive::Transpose {
                perm: perm.to_vec(),
            },
            vec![a],
            None,
        )
    }

    pub fn set_outputs(&mut self, outputs: Vec<VarId>) -> Result<()> {
        for v in &outputs {
            self.shape_of(*v)?;
        }
        self.outputs = outputs;
        Ok(())
    }

    pub fn shape_of(&self, v: VarId) -> Result<Vec<usize>> {
        if let Some(inp) = self.inputs.iter().find(|i| i.id == v) {
            return Ok(inp.shape.clone());
        }
        if let Some(eq) = self.equations.iter().find(|e| e.output == v) {
            return Ok(eq.out_shape.clone());
        }
        Err(Error::UnknownVar(v))
    }

    pub fn find_input(&self, v: VarId) -> Option<&GraphInput> {
        self.inputs.iter().find(|i| i.id == v)
    }

    pub fn find_equation(&self, v: VarId) -> Option<&Equation> {
        self.equations.iter().find(|e| e.output == v)
    }

    /// Number of equations consuming `v`.
    pub fn use_count(&self, v: VarId) -> usize {
        self.equations
            .iter()
            .filter(|e| e.inputs.contains(&v))
            .count()
    }

    /// The shared batch extent of all data inputs.
    pub fn batch_extent(&self) -> Result<usize> {
        let extents: Vec<usize> = self
            .inputs
            .iter()
            .filter(|i| i.role == Role::Data)
            .filter_map(|i| i.batch_axis.map(|a| i.shape[a]))
            .collect();
        match extents.split_first() {
            None => Err(Error::NoBatchAxis),
            Some((&first, rest)) => {
                if rest.iter().all(|&e| e == first) {
                    Ok(first)
                } else {
                    Err(Error::BatchExtentMismatch(extents))
                }
            }
        }
    }

    /// Execute equations in order and return the declared outputs.
    pub fn eval(&self, bindings: &HashMap<VarId, Tensor>) -> Result<Vec<Tensor>> {
        if self.outputs.is_empty() && !self.equations.is_empty() {
            return Err(Error::MissingOutputs);
        }
        let mut env: Vec<Option<Tensor>> = vec![None; self.next_id as usize];
        for inp in &self.inputs {
            let t = bindings.get(&inp.id).ok_or(Error::UnboundInput(inp.id))?;
            if t.shape() != inp.shape.as_slice() {
                return Err(Error::ShapeRule {
                    var: inp.id,
                    expected: inp.shape.clone(),
                    actual: t.shape().to_vec(),
                });
            }
            env[inp.id.0 as usize] = Some(t.clone());
        }
        for eq in &self.equations {
            let value = {
                let mut ins = Vec::with_capacity(eq.inputs.len());
                for v in &eq.inputs {
                    ins.push(
                        env[v.0 as usize]
                            .as_ref()
                            .ok_or(Error::UnknownVar(*v))?,
                    );
                }
                match &eq.primitive {
                    Primitive::Contract { pairs } => ins[0].contract(ins[1], pairs)?,
                    Primitive::Elementwise { op } => Tensor::elementwise(op, &ins)?,
                    Primitive::ReduceSum { axes } => ins[0].reduce_sum(axes)?,
                    Primitive::Broadcast { shape, mapping } => ins[0].broadcast(shape, mapping)?,
                    Primitive::Transpose { perm } => ins[0].transpose(perm)?,
                    Primitive::Literal { value } => value.clone(),
                }
            };
            if value.shape() != eq.out_shape.as_slice() {
                return Err(Error::ShapeRule {
                    var: eq.output,
                    expected: eq.out_shape.clone(),
                    actual: value.shape().to_vec(),
                });
            }
            env[eq.output.0 as usize] = Some(value);
        }
        let mut out = Vec::with_capacity(self.outputs.len());
        for v in &self.outputs {
            out.push(
                env[v.0 as usize]
                    .as_ref()
                    .ok_or(Error::UnknownVar(*v))?
                    .clone(),
            );
        }
        Ok(out)
    }

    /// FLOP and liveness accounting of the written schedule.
    pub fn cost_report(&self) -> CostReport {
        let mut size: HashMap<VarId, u64> = HashMap::new();
        for inp in &self.inputs {
            size.insert(inp.id, element_count(&inp.shape) as u64);
        }
        for eq in &self.equations {
            size.insert(eq.output, element_count(&eq.out_shape) as u64);
        }

        let pinned: std::collections::HashSet<VarId> = self
            .inputs
            .iter()
            .filter(|i| i.role == Role::Parameter)
            .map(|i| i.id)
            .chain(self.outputs.iter().copied())
            .collect();

        let mut last_use: HashMap<VarId, usize> = HashMap::new();
        for (idx, eq) in self.equations.iter().enumerate() {
            for v in &eq.inputs {
                last_use.insert(*v, idx);
            }
        }

        let mut live: u64 = self.inputs.iter().map(|i| size[&i.id]).sum();
        let mut peak = live;
        let mut total_flops = 0u64;
        let mut per_equation = Vec::with_capacity(self.equations.len());

        for (idx, eq) in self.equations.iter().enumerate() {
            let out_size = size[&eq.output];
            let flops = match &eq.primitive {
                Primitive::Contract { pairs } => {
                    let in_shape = self
                        .shape_of(eq.inputs[0])
                        .expect("defined earlier");
                    let inner: u64 = pairs.iter().map(|p| in_shape[p.0] as u64).product();
                    2 * out_size * inner
                }
                Primitive::Elementwise { .. } => out_size,
                Primitive::ReduceSum { .. } => size[&eq.inputs[0]],
                Primitive::Broadcast { .. }
                | Primitive::Transpose { .. }
                | Primitive::Literal { .. } => 0,
            };
            total_flops += flops;
            per_equation.push(EquationCost {
                var: eq.output,
                flops,
                output_size: out_size,
            });

            live += out_size;
            peak = peak.max(live);

            let mut dying: Vec<VarId> = eq.inputs.clone();
            dying.push(eq.output);
            dying.sort();
            dying.dedup();
            for v in dying {
                if pinned.contains(&v) {
                    continue;
                }
                // unwrap_or(idx) frees an output that is never consumed.
                if last_use.get(&v).copied().unwrap_or(idx) == idx {
                    live -= size[&v];
                }
            }
        }

        CostReport {
            total_flops,
            peak_live_values: peak,
            per_equation,
        }
    }

    /// For each variable id, the axis indexing examples, if the value has
    /// per-example structure. Valid for forward (loss) graphs.
    pub fn batch_axes(&self) -> Result<Vec<Option<usize>>> {
        let mut axes: Vec<Option<usize>> = vec![None; self.next_id as usize];
        for inp in &self.inputs {
            axes[inp.id.0 as usize] = inp.batch_axis;
        }
        for eq in &self.equations {
            let get = |v: VarId| axes[v.0 as usize];
            let out = match &eq.primitive {
                Primitive::Literal { .. } => None,
                Primitive::Elementwise { op } => match op.arity() {
                    1 => get(eq.inputs[0]),
                    _ => {
                        let (a, b) = (get(eq.inputs[0]), get(eq.inputs[1]));
                        match (a, b) {
                            (Some(x), Some(y)) if x == y => Some(x),
                            (Some(_), Some(_)) => {
                                return Err(Error::UnsupportedSite {
                                    var: eq.output,
                                    detail: "elementwise operands disagree on the batch axis"
                                        .into(),
                                })
                            }
                            (Some(x), None) => Some(x),
                            (None, Some(y)) => Some(y),
                            (None, None) => None,
                        }
                    }
                },
                Primitive::ReduceSum { axes: red } => match get(eq.inputs[0]) {
                    Some(b) if red.contains(&b) => None,
                    Some(b) => Some(b - red.iter().filter(|&&a| a < b).count()),
                    None => None,
                },
                Primitive::Broadcast { mapping, .. } => {
                    get(eq.inputs[0]).map(|b| mapping[b])
                }
                Primitive::Transpose { perm } => get(eq.inputs[0])
                    .map(|b| perm.iter().position(|&p| p == b).expect("perm covers axes")),
                Primitive::Contract { pairs } => {
                    let (a, b) = (eq.inputs[0], eq.inputs[1]);
                    let (ba, bb) = (get(a), get(b));
                    let lhs_contracted =
                        |ax: usize| pairs.iter().any(|p| p.0 == ax);
                    let rhs_contracted =
                        |ax: usize| pairs.iter().any(|p| p.1 == ax);
                    let lhs_rank = self.shape_of(a)?.len();
                    match (ba, bb) {
                        (None, None) => None,
                        (Some(x), None) => {
                            if lhs_contracted(x) {
                                None
                            } else {
                                Some((0..x).filter(|ax| !lhs_contracted(*ax)).count())
                            }
                        }
                        (None, Some(y)) => {
                            if rhs_contracted(y) {
                                None
                            } else {
                                let lhs_free =
                                    (0..lhs_rank).filter(|ax| !lhs_contracted(*ax)).count();
                                Some(lhs_free + (0..y).filter(|ax| !rhs_contracted(*ax)).count())
                            }
                        }
                        (Some(x), Some(y)) => {
                            let paired_together = pairs.iter().any(|&(l, r)| l == x && r == y);
                            if paired_together {
                                None
                            } else {
                                return Err(Error::UnsupportedSite {
                                    var: eq.output,
                                    detail:
                                        "contract mixes batch axes of its operands across examples"
                                            .into(),
                                });
                            }
                        }
                    }
                }
            };
            axes[eq.output.0 as usize] = out;
        }
        Ok(axes)
    }

    /// Rebuild this forward graph with a different batch extent. Axes that
    /// carry the batch extent are found by a structural fixpoint over the
    /// equations, so constant-valued axes that merely equal the batch size
    /// are not disturbed.
    pub fn with_batch_extent(&self, new_b: usize) -> Result<Graph> {
        let value_axes = self.batch_axes()?;
        let mut marks: Vec<Vec<bool>> = Vec::with_capacity(self.next_id as usize);
        for id in 0..self.next_id {
            let rank = self.shape_of(VarId(id)).map(|s| s.len()).unwrap_or(0);
            marks.push(vec![false; rank]);
        }
        for (id, ax) in value_axes.iter().enumerate() {
            if let Some(a) = ax {
                marks[id][*a] = true;
            }
        }

        // Propagate batch-extent marks along structural axis identities
        // until stable; broadcast back-propagation is what picks up bias
        // replication axes.
        let mut changed = true;
        while changed {
            changed = false;
            let mut link = |marks: &mut Vec<Vec<bool>>, va: VarId, aa: usize, vb: VarId, ab: usize| {
                let m = marks[va.0 as usize][aa] | marks[vb.0 as usize][ab];
                if m && !marks[va.0 as usize][aa] {
                    marks[va.0 as usize][aa] = true;
                    changed = true;
                }
                if m && !marks[vb.0 as usize][ab] {
                    marks[vb.0 as usize][ab] = true;
                    changed = true;
                }
            };
            for eq in &self.equations {
                let o = eq.output;
                match &eq.primitive {
                    Primitive::Literal { .. } => {}
                    Primitive::Elementwise { .. } => {
                        for &v in &eq.inputs {
                            let rank = marks[v.0 as usize].len();
                            if rank == eq.out_shape.len() {
                                for ax in 0..rank {
                                    link(&mut marks, v, ax, o, ax);
                                }
                            }
                        }
                    }
                    Primitive::ReduceSum { axes } => {
                        let v = eq.inputs[0];
                        let rank = marks[v.0 as usize].len();
                        let mut out_ax = 0;
                        for ax in 0..rank {
                            if !axes.contains(&ax) {
                                link(&mut marks, v, ax, o, out_ax);
                                out_ax += 1;
                            }
                        }
                    }
                    Primitive::Broadcast { mapping, .. } => {
                        let v = eq.inputs[0];
                        for (i, &t) in mapping.iter().enumerate() {
                            link(&mut marks, v, i, o, t);
                        }
                    }
                    Primitive::Transpose { perm } => {
                        let v = eq.inputs[0];
                        for (i, &p) in perm.iter().enumerate() {
                            link(&mut marks, v, p, o, i);
                        }
                    }
                    Primitive::Contract { pairs } => {
                        let (a, b) = (eq.inputs[0], eq.inputs[1]);
                        for &(la, ra) in pairs {
                            link(&mut marks, a, la, b, ra);
                        }
                        let lhs_rank = marks[a.0 as usize].len();
                        let rhs_rank = marks[b.0 as usize].len();
                        let mut out_ax = 0;
                        for ax in 0..lhs_rank {
                            if !pairs.iter().any(|p| p.0 == ax) {
                                link(&mut marks, a, ax, o, out_ax);
                                out_ax += 1;
                            }
                        }
                        for ax in 0..rhs_rank {
                            if !pairs.iter().any(|p| p.1 == ax) {
                                link(&mut marks, b, ax, o, out_ax);
                                out_ax += 1;
                            }
                        }
                    }
                }
            }
        }

        for eq in &self.equations {
            if let Primitive::Literal { .. } = eq.primitive {
                if marks[eq.output.0 as usize].iter().any(|&m| m) {
                    return Err(Error::Config(
                        "a literal carries the batch extent; graph cannot be rebatched".into(),
                    ));
                }
            }
        }
        for inp in &self.inputs {
            if inp.role == Role::Parameter && marks[inp.id.0 as usize].iter().any(|&m| m) {
                return Err(Error::Config(format!(
                    "parameter {} carries the batch extent; graph cannot be rebatched",
                    inp.id
                )));
            }
        }

        let mut g = Graph::new();
        g.next_id = self.next_id;
        for inp in &self.inputs {
            let mut shape = inp.shape.clone();
            for (ax, &m) in marks[inp.id.0 as usize].iter().enumerate() {
                if m {
                    shape[ax] = new_b;
                }
            }
            g.inputs.push(GraphInput {
                id: inp.id,
                name: inp.name.clone(),
                shape,
                role: inp.role,
                batch_axis: inp.batch_axis,
            });
        }
        for eq in &self.equations {
            let primitive = match &eq.primitive {
                Primitive::Broadcast { shape, mapping } => {
                    let mut shape = shape.clone();
                    for (ax, &m) in marks[eq.output.0 as usize].iter().enumerate() {
                        if m {
                            shape[ax] = new_b;
                        }
                    }
                    Primitive::Broadcast {
                        shape,
                        mapping: mapping.clone(),
                    }
                }
                other => other.clone(),
            };
            let mut shapes = Vec::with_capacity(eq.inputs.len());
            for v in &eq.inputs {
                shapes.push(g.shape_of(*v)?);
            }
            let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
            let out_shape = primitive.infer_shape(&refs)?;
            g.equations.push(Equation {
                output: eq.output,
                primitive,
                inputs: eq.inputs.clone(),
                out_shape,
                batch_reduce: eq.batch_reduce.clone(),
            });
        }
        g.outputs = self.outputs.clone();
        Ok(g)
    }
}

fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("f64[{}]", dims.join(","))
}

impl fmt::Display for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ins: Vec<String> = self
            .inputs
            .iter()
            .map(|i| {
                let role = match i.role {
                    Role::Parameter => "param",
                    Role::Data => "data",
                    Role::Constant => "const",
                };
                match i.batch_axis {
                    Some(a) => format!("{}:{} {}[batch={}] {}", i.id, fmt_shape(&i.shape), role, a, i.name),
                    None => format!("{}:{} {} {}", i.id, fmt_shape(&i.shape), role, i.name),
                }
            })
            .collect();
        writeln!(f, "inputs: {}", ins.join(", "))?;
        for eq in &self.equations {
            let attrs = match &eq.primitive {
                Primitive::Contract { pairs } => {
                    let parts: Vec<String> =
                        pairs.iter().map(|(a, b)| format!("({a},{b})")).collect();
                    format!("[{}]", parts.join(","))
                }
                Primitive::Elementwise { op } => match op {
                    ElemOp::AbsPow(a) => format!("[{a}]"),
                    ElemOp::MaxWith(c) => format!("[{c}]"),
                    _ => String::new(),
                },
                Primitive::ReduceSum { axes } => {
                    let parts: Vec<String> = axes.iter().map(|a| a.to_string()).collect();
                    format!("[{}]", parts.join(","))
                }
                Primitive::Broadcast { shape, mapping } => {
                    let s: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
                    let m: Vec<String> = mapping.iter().map(|d| d.to_string()).collect();
                    format!("[shape=({}), map=({})]", s.join(","), m.join(","))
                }
                Primitive::Transpose { perm } => {
                    let parts: Vec<String> = perm.iter().map(|a| a.to_string()).collect();
                    format!("[{}]", parts.join(","))
                }
                Primitive::Literal { value } => {
                    if value.is_scalar() {
                        format!("[{}]", value.scalar_value())
                    } else {
                        format!("[{}]", fmt_shape(value.shape()))
                    }
                }
            };
            let args: Vec<String> = eq.inputs.iter().map(|v| v.to_string()).collect();
            let sep = if args.is_empty() { "" } else { " " };
            let tag = match &eq.batch_reduce {
                Some(t) => format!("  # batch_reduce({})", t.param),
                None => String::new(),
            };
            writeln!(
                f,
                "{}:{} = {}{}{}{}{}",
                eq.output,
                fmt_shape(&eq.out_shape),
                eq.primitive.name(),
                attrs,
                sep,
                args.join(" "),
                tag
            )?;
        }
        let outs: Vec<String> = self.outputs.iter().map(|v| v.to_string()).collect();
        writeln!(f, "outputs: {}", outs.join(", "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bindings(pairs: Vec<(VarId, Tensor)>) -> HashMap<VarId, Tensor> {
        pairs.into_iter().collect()
    }

    #[test]
    fn eval_vector_matrix_product() {
        let mut g = Graph::new();
        let x = g.data("x", &[2], 0);
        let w = g.parameter("w", &[2, 2]);
        let y = g.contract(x, w, &[(0, 0)]).unwrap();
        g.set_outputs(vec![y]).unwrap();
        let out = g
            .eval(&bindings(vec![
                (x, Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()),
                (w, Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
            ]))
            .unwrap();
        assert_eq!(out[0].data(), &[4.0, 6.0]);
    }

    #[test]
    fn eval_identity_graph_echoes_input() {
        let mut g = Graph::new();
        let x = g.data("x", &[3], 0);
        g.set_outputs(vec![x]).unwrap();
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let out = g.eval(&bindings(vec![(x, t.clone())])).unwrap();
        assert_eq!(out[0], t);
    }

    #[test]
    fn eval_rejects_unbound_and_mis_shaped_inputs() {
        let mut g = Graph::new();
        let x = g.data("x", &[2], 0);
        g.set_outputs(vec![x]).unwrap();
        assert!(matches!(
            g.eval(&HashMap::new()),
            Err(Error::UnboundInput(_))
        ));
        assert!(matches!(
            g.eval(&bindings(vec![(x, Tensor::zeros(&[3]))])),
            Err(Error::ShapeRule { .. })
        ));
    }

    #[test]
    fn printer_matches_pinned_contract_format() {
        let mut g = Graph::new();
        let _pad = g.parameter("pad", &[1]);
        let a = g.data("a", &[4, 3], 0);
        let b = g.parameter("b", &[3, 2]);
        let c = g.contract(a, b, &[(1, 0)]).unwrap();
        g.set_outputs(vec![c]).unwrap();
        let text = g.to_string();
        assert!(
            text.contains("v3:f64[4,2] = contract[(1,0)] v1 v2"),
            "got:\n{text}"
        );
    }

    #[test]
    fn cost_of_single_contract_matches_formula() {
        let mut g = Graph::new();
        let a = g.data("a", &[4, 3], 0);
        let b = g.parameter("b", &[3, 2]);
        let c = g.contract(a, b, &[(1, 0)]).unwrap();
        g.set_outputs(vec![c]).unwrap();
        let report = g.cost_report();
        assert_eq!(report.total_flops, 48); // 2 * (4*2) * 3
        assert_eq!(report.per_equation.len(), 1);
    }

    #[test]
    fn cost_of_literal_only_graph() {
        let mut g = Graph::new();
        let l = g.literal(Tensor::zeros(&[5]));
        g.set_outputs(vec![l]).unwrap();
        let report = g.cost_report();
        assert_eq!(report.total_flops, 0);
        assert_eq!(report.peak_live_values, 5);
    }

    #[test]
    fn liveness_frees_dead_intermediates() {
        let mut g = Graph::new();
        let x = g.data("x", &[8], 0);
        let a = g.unary(ElemOp::Square, x).unwrap(); // dies after b
        let b = g.unary(ElemOp::Neg, a).unwrap();
        let c = g.reduce_sum(b, &[0]).unwrap();
        g.set_outputs(vec![c]).unwrap();
        let report = g.cost_report();
        // x dies at a's definition, a dies at b's: the peak is two 8-wide
        // values coexisting, never three.
        assert_eq!(report.peak_live_values, 16);
    }

    #[test]
    fn batch_axes_track_through_ops() {
        let mut g = Graph::new();
        let x = g.data("x", &[4, 3], 0);
        let w = g.parameter("w", &[3, 2]);
        let t = g.contract(x, w, &[(1, 0)]).unwrap();
        let s = g.unary(ElemOp::Tanh, t).unwrap();
        let tr = g.transpose(s, &[1, 0]).unwrap();
        let r = g.reduce_sum(tr, &[1]).unwrap(); // sums over batch
        g.set_outputs(vec![r]).unwrap();
        let axes = g.batch_axes().unwrap();
        assert_eq!(axes[x.0 as usize], Some(0));
        assert_eq!(axes[w.0 as usize], None);
        assert_eq!(axes[t.0 as usize], Some(0));
        assert_eq!(axes[tr.0 as usize], Some(1));
        assert_eq!(axes[r.0 as usize], None);
    }

    #[test]
    fn rebatch_rewrites_data_and_broadcast_extents() {
        let mut g = Graph::new();
        let x = g.data("x", &[4, 3], 0);
        let w = g.parameter("w", &[3, 2]);
        let bparam = g.parameter("b", &[2]);
        let t = g.contract(x, w, &[(1, 0)]).unwrap();
        let bb = g.broadcast(bparam, &[4, 2], &[1]).unwrap();
        let z = g.binary(ElemOp::Add, t, bb).unwrap();
        let loss = g.reduce_sum(z, &[0, 1]).unwrap();
        g.set_outputs(vec![loss]).unwrap();

        let g1 = g.with_batch_extent(1).unwrap();
        assert_eq!(g1.find_input(x).unwrap().shape, vec![1, 3]);
        assert_eq!(g1.shape_of(bb).unwrap(), vec![1, 2]);
        assert_eq!(g1.find_input(w).unwrap().shape, vec![3, 2]);
        assert_eq!(g1.batch_extent().unwrap(), 1);

        // Evaluating the rebatched graph on a slice matches slicing by hand.
        let xs = Tensor::from_fn(&[4, 3], |i| i as f64);
        let ws = Tensor::from_fn(&[3, 2], |i| 0.1 * i as f64);
        let bs = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let full = g
            .eval(&bindings(vec![
                (x, xs.clone()),
                (w, ws.clone()),
                (bparam, bs.clone()),
            ]))
            .unwrap()[0]
            .scalar_value();
        let mut acc = 0.0;
        for i in 0..4 {
            acc += g1
                .eval(&bindings(vec![
                    (x, xs.slice_axis(0, i).unwrap()),
                    (w, ws.clone()),
                    (bparam, bs.clone()),
                ]))
                .unwrap()[0]
                .scalar_value();
        }
        assert!((full - acc).abs() < 1e-12);
    }

    #[test]
    fn rebatch_refuses_parameters_carrying_batch() {
        let mut g = Graph::new();
        let x = g.data("x", &[4, 3], 0);
        let w = g.parameter("w", &[4, 3]); // same shape as the batch
        let z = g.binary(ElemOp::Mul, x, w).unwrap();
        let loss = g.reduce_sum(z, &[0, 1]).unwrap();
        g.set_outputs(vec![loss]).unwrap();
        assert!(matches!(
            g.with_batch_extent(2),
            Err(Error::Config(_))
        ));
    }
}
