use super::TrainError;
use crate::nnet::{log_softmax, softmax, Real};
use crate::tokenizer::EncodedSequence;

/// Summed response negative log-likelihood and the number of predicted
/// tokens (response tokens plus EOS).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmLoss<F> {
    pub sum: F,
    pub count: usize,
}

impl<F: Real> LmLoss<F> {
    pub fn mean(&self) -> F {
        self.sum / F::from_usize(self.count).unwrap()
    }
}

fn response_region(seq: &EncodedSequence) -> Result<std::ops::Range<usize>, TrainError> {
    match seq.response_start {
        Some(start) if start >= 1 && start < seq.len() => Ok(start..seq.len()),
        _ => Err(TrainError::EmptyResponseRegion),
    }
}

/// `-sum log softmax(lm_logits[i-1])[token_i]` over the response region.
/// Context positions contribute nothing.
pub fn lm_loss<F: Real>(lm_logits: &[F], vocab_size: usize, seq: &EncodedSequence) -> Result<LmLoss<F>, TrainError> {
    let region = response_region(seq)?;
    let count = region.len();
    let mut sum = F::zero();
    for i in region {
        let row = &lm_logits[(i - 1) * vocab_size..i * vocab_size];
        sum -= log_softmax(row)[seq.token_ids[i]];
    }
    Ok(LmLoss { sum, count })
}

/// Loss plus its gradient with respect to every logit, scaled by `scale`.
pub fn lm_loss_grad<F: Real>(
    lm_logits: &[F],
    vocab_size: usize,
    seq: &EncodedSequence,
    scale: F,
) -> Result<(LmLoss<F>, Vec<F>), TrainError> {
    let region = response_region(seq)?;
    let count = region.len();
    let mut grad = vec![F::zero(); lm_logits.len()];
    let mut sum = F::zero();
    for i in region {
        let at = (i - 1) * vocab_size;
        let row = &lm_logits[at..at + vocab_size];
        let gold = seq.token_ids[i];
        sum -= log_softmax(row)[gold];
        for (g, p) in grad[at..at + vocab_size].iter_mut().zip(softmax(row)) {
            *g = p * scale;
        }
        grad[at + gold] -= scale;
    }
    Ok((LmLoss { sum, count }, grad))
}

/// Cross-entropy of the two-way NSP head, `-log softmax(logits)[label]`.
pub fn nsp_loss<F: Real>(logits: [F; 2], label: usize) -> Result<F, TrainError> {
    if label > 1 {
        return Err(TrainError::InvalidLabel(label));
    }
    Ok(-log_softmax(&logits)[label])
}

pub fn nsp_loss_grad<F: Real>(logits: [F; 2], label: usize, scale: F) -> Result<(F, [F; 2]), TrainError> {
    let loss = nsp_loss(logits, label)?;
    let p = softmax(&logits);
    let mut g = [p[0] * scale, p[1] * scale];
    g[label] -= scale;
    Ok((loss, g))
}

/// Probability that the candidate is the true continuation.
pub fn nsp_positive_prob<F: Real>(logits: [F; 2]) -> F {
    softmax(&logits)[1]
}
