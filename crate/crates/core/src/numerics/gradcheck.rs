use super::{NodeId, NumericsError, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOutcome {
    /// Max over all coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// Same quantity restricted to each input.
    pub per_input: Vec<f64>,
    pub coordinates: usize,
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &ids)?;
    let out = tape.value(root);
    if out.len() != 1 {
        return Err(NumericsError::NonScalarRoot(out.shape().to_vec()));
    }
    Ok(out.data()[0])
}

/// Compares the tape gradient of a scalar function against central finite
/// differences `(f(x+h) - f(x-h)) / 2h`, one coordinate at a time.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckOutcome, NumericsError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(NumericsError::InvalidStep(h));
    }
    let first = evaluate(&f, inputs)?;
    let second = evaluate(&f, inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(NumericsError::NonDeterministicFunction { first, second });
    }

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &ids)?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            tape.grad(id)
                .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
        })
        .collect();

    let mut per_input = vec![0.0f64; inputs.len()];
    let mut work = inputs.to_vec();
    let mut coordinates = 0;
    for (which, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let orig = work[which].data()[k];
            work[which].data_mut()[k] = orig + h;
            let plus = evaluate(&f, &work)?;
            work[which].data_mut()[k] = orig - h;
            let minus = evaluate(&f, &work)?;
            work[which].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            per_input[which] = per_input[which].max(rel);
            coordinates += 1;
        }
    }
    Ok(GradCheckOutcome {
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
        coordinates,
    })
}
