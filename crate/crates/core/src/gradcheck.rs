//! Graph evaluation and finite-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// A computation that can be recorded onto a tape at any precision.
///
/// Every tensor the computation depends on and that should be
/// differentiated (inputs and parameters alike) is passed in as an input.
pub trait Graph {
    /// Expected shape of each input, in order.
    fn signature(&self) -> Vec<Vec<usize>>;

    /// Records the computation; returns the output nodes.
    fn build<T: Scalar>(&self, tape: &mut Tape<'_, T>, inputs: &[NodeId]) -> Result<Vec<NodeId>>;
}

fn check_signature<G: Graph, T: Scalar>(graph: &G, inputs: &[Tensor<T>]) -> Result<()> {
    let sig = graph.signature();
    if sig.len() != inputs.len() {
        return Err(Error::Shape {
            context: "graph input count",
            expected: vec![sig.len()],
            actual: vec![inputs.len()],
        });
    }
    for (expected, input) in sig.iter().zip(inputs) {
        if expected.as_slice() != input.shape() {
            return Err(Error::Shape {
                context: "graph input",
                expected: expected.clone(),
                actual: input.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// A recorded evaluation: output values plus the tape that produced them.
pub struct Evaluation<'a, T: Scalar = f32> {
    pub outputs: Vec<Tensor<T>>,
    pub tape: Tape<'a, T>,
    pub input_ids: Vec<NodeId>,
    pub output_ids: Vec<NodeId>,
}

/// Runs `graph` on `inputs`, returning its outputs and the recorded tape.
///
/// Inputs are differentiable leaves, in the same order as given.
pub fn evaluate<'a, G: Graph, T: Scalar>(graph: &G, inputs: &'a [Tensor<T>]) -> Result<Evaluation<'a, T>> {
    check_signature(graph, inputs)?;
    let mut tape = Tape::new();
    let input_ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf_ref(t)).collect();
    let output_ids = graph.build(&mut tape, &input_ids)?;
    let outputs = output_ids.iter().map(|&o| tape.value(o).clone()).collect();
    Ok(Evaluation {
        outputs,
        tape,
        input_ids,
        output_ids,
    })
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Pass threshold on the per-input relative error.
    pub tol: f64,
    /// Central-difference step.
    pub fd_step: f64,
    /// At most this many coordinates are probed per input tensor.
    pub max_coords_per_input: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tol: 1e-4,
            fd_step: 1e-3,
            max_coords_per_input: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputCheck {
    pub input_index: usize,
    /// `max |analytic − numeric| / max |numeric|` over probed coordinates.
    pub rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a ±step probe crossed a ReLU/abs kink.
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub inputs: Vec<InputCheck>,
    pub max_error: f64,
    pub excluded: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Compares reverse-mode gradients (32-bit) of the first output against
/// central differences of a 64-bit replica of the same graph.
pub fn grad_check<G: Graph>(
    graph: &G,
    inputs: &[Tensor],
    tol: f64,
    fd_step: f64,
) -> Result<GradReport> {
    grad_check_with(
        graph,
        inputs,
        &GradCheckOptions {
            tol,
            fd_step,
            ..GradCheckOptions::default()
        },
    )
}

pub fn grad_check_with<G: Graph>(
    graph: &G,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradReport> {
    if !(opts.tol > 0.0 && opts.fd_step > 0.0) {
        return Err(Error::Config("grad_check needs tol > 0 and fd_step > 0".into()));
    }
    let eval = evaluate(graph, inputs)?;
    let (tape, ids) = (&eval.tape, &eval.input_ids);
    let out_id = *eval
        .output_ids
        .first()
        .ok_or_else(|| Error::Contract("graph produced no outputs".into()))?;
    let grads = tape.gradient(out_id, 1.0)?;
    let pattern32 = tape.kink_pattern();

    let inputs64: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    let (_, base_pattern) = eval64(graph, &inputs64)?;
    let all_excluded = base_pattern != pattern32;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradReport {
        inputs: Vec::with_capacity(inputs.len()),
        max_error: 0.0,
        excluded: 0,
        tol: opts.tol,
        pass: true,
    };
    for (k, input) in inputs64.iter().enumerate() {
        let analytic = grads.wrt_or_zeros(ids[k], input.shape());
        let n = input.len();
        let coords: Vec<usize> = if n <= opts.max_coords_per_input {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords_per_input).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = InputCheck {
            input_index: k,
            rel_error: 0.0,
            checked: 0,
            excluded: 0,
        };
        let mut max_diff = 0.0f64;
        let mut max_numeric = 0.0f64;
        let mut perturbed = inputs64.clone();
        for j in coords {
            let orig = input.data()[j];
            perturbed[k].data_mut()[j] = orig + opts.fd_step;
            let (plus, plus_pattern) = eval64(graph, &perturbed)?;
            perturbed[k].data_mut()[j] = orig - opts.fd_step;
            let (minus, minus_pattern) = eval64(graph, &perturbed)?;
            perturbed[k].data_mut()[j] = orig;
            if all_excluded || plus_pattern != base_pattern || minus_pattern != base_pattern {
                check.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.fd_step);
            let a = analytic.data()[j] as f64;
            max_diff = max_diff.max((a - numeric).abs());
            max_numeric = max_numeric.max(numeric.abs());
            check.checked += 1;
        }
        check.rel_error = if max_diff == 0.0 {
            0.0
        } else {
            max_diff / max_numeric.max(f64::MIN_POSITIVE)
        };
        report.max_error = report.max_error.max(check.rel_error);
        report.excluded += check.excluded;
        report.inputs.push(check);
    }
    report.pass = report.max_error <= opts.tol;
    Ok(report)
}

fn eval64<G: Graph>(graph: &G, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<i8>)> {
    let mut tape = Tape::<f64>::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.constant_ref(t)).collect();
    let outs = graph.build(&mut tape, &ids)?;
    let out = outs
        .first()
        .ok_or_else(|| Error::Contract("graph produced no outputs".into()))?;
    Ok((tape.value(*out).item()?, tape.kink_pattern()))
}
