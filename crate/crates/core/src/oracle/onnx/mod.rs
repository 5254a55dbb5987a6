//! ONNX classifiers run by a built-in graph interpreter (float32, CPU).
//!
//! Only the default operator domain is understood; [`ops::SUPPORTED_OPS`]
//! lists what can be executed. Loading fails with the full list of missing
//! operators rather than at the first one.

mod ops;
mod proto;
mod tensor;

use std::collections::{BTreeSet, HashMap};
use std::marker::PhantomData;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ImageShape;

use super::{ClassifierOracle, PreprocessingDescriptor};
use ops::{Op, SUPPORTED_OPS};
use proto::{GraphProto, ModelProto};
use tensor::Tensor;

const ONNX_MICRO_BATCH: usize = 16;

struct Step {
    op: Op,
    inputs: Vec<Option<usize>>,
    output: usize,
    label: String,
}

/// A graph compiled to a flat list of steps over numbered value slots.
struct Graph {
    slots: usize,
    constants: Vec<(usize, Arc<Tensor>)>,
    input: usize,
    output: usize,
    steps: Vec<Step>,
    /// Slots no longer needed after each step.
    release: Vec<Vec<usize>>,
}

fn model_error(label: &str, e: Error) -> Error {
    match e {
        Error::Model(m) => Error::Model(format!("{label}: {m}")),
        other => Error::Model(format!("{label}: {other}")),
    }
}

impl Graph {
    fn compile(model: ModelProto, input_name: &str, output_name: &str) -> Result<Graph> {
        let opset = model
            .opsets
            .iter()
            .find(|(domain, _)| domain.is_empty() || domain == "ai.onnx")
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Model("model does not import the default operator set".into()))?;
        let GraphProto { nodes, initializers, inputs, outputs } = model.graph;

        let unsupported: BTreeSet<String> = nodes
            .iter()
            .filter(|n| !(n.domain.is_empty() || n.domain == "ai.onnx") || !SUPPORTED_OPS.contains(&n.op_type.as_str()))
            .map(|n| if n.domain.is_empty() { n.op_type.clone() } else { format!("{}:{}", n.domain, n.op_type) })
            .collect();
        if !unsupported.is_empty() {
            return Err(Error::Model(format!(
                "unsupported operators: {}",
                unsupported.into_iter().collect::<Vec<_>>().join(", ")
            )));
        }

        let mut slots: HashMap<String, usize> = HashMap::new();
        let mut known: HashMap<usize, Arc<Tensor>> = HashMap::new();
        let slot_of = |name: &str, slots: &mut HashMap<String, usize>| {
            let next = slots.len();
            *slots.entry(name.to_string()).or_insert(next)
        };
        for (name, t) in initializers {
            let s = slot_of(&name, &mut slots);
            known.insert(s, Arc::new(t));
        }
        let graph_inputs: Vec<&str> = inputs.iter().map(|v| v.name.as_str()).filter(|n| !slots.contains_key(*n)).collect();
        if !graph_inputs.contains(&input_name) {
            return Err(Error::Model(format!(
                "model has no input named {input_name:?} (inputs: {})",
                graph_inputs.join(", ")
            )));
        }
        if !outputs.iter().any(|o| o.name == output_name) {
            let names: Vec<&str> = outputs.iter().map(|o| o.name.as_str()).collect();
            return Err(Error::Model(format!(
                "model has no output named {output_name:?} (outputs: {})",
                names.join(", ")
            )));
        }
        let input = slot_of(input_name, &mut slots);

        let mut steps = Vec::new();
        for node in &nodes {
            let label = format!("{} node '{}'", node.op_type, node.name);
            if node.outputs.iter().skip(1).any(|o| !o.is_empty()) {
                return Err(Error::Model(format!("{label}: only the first output is supported")));
            }
            let op = Op::parse(node, opset).map_err(|e| model_error(&label, e))?;
            let mut step_inputs = Vec::with_capacity(node.inputs.len());
            for name in &node.inputs {
                if name.is_empty() {
                    step_inputs.push(None);
                    continue;
                }
                let s = *slots
                    .get(name)
                    .ok_or_else(|| Error::Model(format!("{label} consumes undefined value {name:?}")))?;
                step_inputs.push(Some(s));
            }
            let out_name = node.outputs.first().ok_or_else(|| Error::Model(format!("{label} has no output")))?;
            let output = slot_of(out_name, &mut slots);
            let foldable = step_inputs.iter().flatten().all(|s| known.contains_key(s));
            if foldable {
                let args: Vec<Option<&Tensor>> = step_inputs.iter().map(|s| s.map(|s| known[&s].as_ref())).collect();
                let value = op.eval(&args).map_err(|e| model_error(&label, e))?;
                known.insert(output, Arc::new(value));
            } else {
                steps.push(Step { op, inputs: step_inputs, output, label });
            }
        }
        let output = *slots
            .get(output_name)
            .ok_or_else(|| Error::Model(format!("no node produces output {output_name:?}")))?;

        let mut last_use = HashMap::new();
        for (k, step) in steps.iter().enumerate() {
            for s in step.inputs.iter().flatten() {
                last_use.insert(*s, k);
            }
        }
        let mut release = vec![Vec::new(); steps.len()];
        for (s, k) in last_use {
            if s != output {
                release[k].push(s);
            }
        }
        // Only constants some step still reads need to be loaded per run.
        let needed: BTreeSet<usize> = steps.iter().flat_map(|s| s.inputs.iter().flatten().copied()).chain([output]).collect();
        let constants = known.into_iter().filter(|(s, _)| needed.contains(s)).collect();
        Ok(Graph { slots: slots.len(), constants, input, output, steps, release })
    }

    fn run(&self, input: Tensor) -> Result<Tensor> {
        let mut values: Vec<Option<Arc<Tensor>>> = vec![None; self.slots];
        for (s, t) in &self.constants {
            values[*s] = Some(Arc::clone(t));
        }
        values[self.input] = Some(Arc::new(input));
        for (step, release) in self.steps.iter().zip(&self.release) {
            let args: Vec<Option<&Tensor>> = step.inputs.iter().map(|s| s.and_then(|s| values[s].as_deref())).collect();
            let value = step.op.eval(&args).map_err(|e| model_error(&step.label, e))?;
            values[step.output] = Some(Arc::new(value));
            for s in release {
                values[*s] = None;
            }
        }
        let out = values[self.output]
            .take()
            .ok_or_else(|| Error::Model("graph output was never computed".into()))?;
        Ok(Arc::try_unwrap(out).unwrap_or_else(|shared| (*shared).clone()))
    }
}

/// A classifier loaded from an ONNX file and its preprocessing descriptor.
pub struct OnnxOracle<T> {
    graph: Graph,
    shape: ImageShape,
    num_classes: usize,
    _scalar: PhantomData<fn() -> T>,
}

impl<T> std::fmt::Debug for OnnxOracle<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OnnxOracle")
            .field("shape", &self.shape)
            .field("num_classes", &self.num_classes)
            .field("steps", &self.graph.steps.len())
            .finish()
    }
}

pub fn load_onnx_oracle<T: Scalar>(path: impl AsRef<Path>, meta: &PreprocessingDescriptor) -> Result<OnnxOracle<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    OnnxOracle::from_bytes(&bytes, meta).map_err(|e| match e {
        Error::Model(m) => Error::Model(format!("{}: {m}", path.display())),
        Error::Parse { offset, message } => Error::Model(format!("{}: byte {offset}: {message}", path.display())),
        other => other,
    })
}

impl<T: Scalar> OnnxOracle<T> {
    pub fn from_bytes(bytes: &[u8], meta: &PreprocessingDescriptor) -> Result<Self> {
        let model = proto::parse_model(bytes)?;
        let shape = meta.input_shape();
        if let Some(info) = model.graph.inputs.iter().find(|v| v.name == meta.input_name) {
            check_input_dims(info.dims.as_deref(), shape)?;
        }
        let graph = Graph::compile(model, &meta.input_name, &meta.output_name)?;
        let probe = graph.run(Tensor::f32(vec![1, shape.c, shape.h, shape.w], vec![0.0; shape.len()]))?;
        let num_classes = probe.len();
        if num_classes < 2 || probe.shape().first() != Some(&1) {
            return Err(Error::Model(format!(
                "output {:?} has shape {:?} for one image; expected [1, classes]",
                meta.output_name,
                probe.shape()
            )));
        }
        Ok(Self { graph, shape, num_classes, _scalar: PhantomData })
    }
}

fn check_input_dims(dims: Option<&[Option<i64>]>, shape: ImageShape) -> Result<()> {
    let Some(dims) = dims else { return Ok(()) };
    let want = [shape.c, shape.h, shape.w];
    let fits = dims.len() == 4
        && dims[0].is_none_or(|b| b == 1 || b <= 0)
        && dims[1..].iter().zip(want).all(|(d, w)| d.is_none_or(|d| d == w as i64 || d <= 0));
    if fits {
        Ok(())
    } else {
        let shown: Vec<String> = dims.iter().map(|d| d.map_or("?".into(), |v| v.to_string())).collect();
        Err(Error::shape(
            format!("[batch, {}, {}, {}]", shape.c, shape.h, shape.w),
            format!("model input [{}]", shown.join(", ")),
        ))
    }
}

impl<T: Scalar> ClassifierOracle<T> for OnnxOracle<T> {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_shape(&self) -> ImageShape {
        self.shape
    }

    /// Images run one at a time in parallel, so a graph exported with a
    /// fixed batch of one works as well as a dynamic one.
    fn logits(&self, images: &[T], n: usize) -> Result<Vec<T>> {
        let per_image = self.shape.len();
        if images.len() != n * per_image {
            return Err(Error::shape(format!("{n} images of {}", self.shape), format!("{} values", images.len())));
        }
        let dims = vec![1, self.shape.c, self.shape.h, self.shape.w];
        let rows: Vec<Vec<T>> = images
            .par_chunks(per_image.max(1))
            .map(|img| {
                let x = Tensor::f32(dims.clone(), img.iter().map(|v| v.to_f32_lossy()).collect());
                let out = self.graph.run(x)?;
                let logits = out.f32s()?;
                if logits.len() != self.num_classes {
                    return Err(Error::Model(format!("output has {} values, expected {}", logits.len(), self.num_classes)));
                }
                Ok(logits.iter().map(|v| T::lit(f64::from(*v))).collect())
            })
            .collect::<Result<_>>()?;
        Ok(rows.concat())
    }

    fn micro_batch(&self) -> usize {
        ONNX_MICRO_BATCH
    }
}
