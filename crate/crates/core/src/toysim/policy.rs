use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ToySimError;

/// Tabular autoregressive softmax policy.
///
/// Each decision is made from the state `(position, class of the previous
/// token)`; the first position uses a dedicated start class. Sampling stops
/// at the end token or after `max_len` tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    vocab: usize,
    max_len: usize,
    /// Class of every token id, in `0..n_classes`.
    classes: Vec<usize>,
    n_classes: usize,
    eos: Option<usize>,
    logits: Vec<f64>,
}

impl ToyPolicy {
    /// All-zero (uniform) policy.
    pub fn uniform(classes: Vec<usize>, max_len: usize, eos: Option<usize>) -> Self {
        let vocab = classes.len();
        let n_classes = classes.iter().copied().max().map_or(0, |m| m + 1);
        assert!(vocab > 0 && max_len > 0, "empty policy shape");
        assert!(eos.is_none_or(|e| e < vocab), "end token outside vocabulary");
        let states = max_len * (n_classes + 1);
        Self {
            vocab,
            max_len,
            classes,
            n_classes,
            eos,
            logits: vec![0.0; states * vocab],
        }
    }

    /// Policy whose classes are the tokens themselves.
    pub fn uniform_identity(vocab: usize, max_len: usize, eos: Option<usize>) -> Self {
        Self::uniform((0..vocab).collect(), max_len, eos)
    }

    /// Logits drawn independently from `N(0, scale^2)`.
    pub fn randomized<R: Rng + ?Sized>(mut self, rng: &mut R, scale: f64) -> Self {
        for l in &mut self.logits {
            *l = scale * rng.sample::<f64, _>(StandardNormal);
        }
        self
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn eos(&self) -> Option<usize> {
        self.eos
    }

    pub fn n_states(&self) -> usize {
        self.max_len * (self.n_classes + 1)
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn state(&self, position: usize, prev: Option<usize>) -> usize {
        position * (self.n_classes + 1) + prev.map_or(0, |t| self.classes[t] + 1)
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.logits[state * self.vocab..(state + 1) * self.vocab]
    }

    pub fn probs(&self, state: usize) -> Vec<f64> {
        let row = self.row(state);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    pub fn log_probs(&self, state: usize) -> Vec<f64> {
        let row = self.row(state);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        row.iter().map(|l| l - lse).collect()
    }

    /// States visited while emitting `tokens`, one per token.
    pub fn states_for(&self, tokens: &[usize]) -> Result<Vec<usize>, ToySimError> {
        self.check_tokens(tokens)?;
        let mut prev = None;
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(pos, &t)| {
                let s = self.state(pos, prev);
                prev = Some(t);
                s
            })
            .collect())
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<(), ToySimError> {
        if tokens.len() > self.max_len {
            return Err(ToySimError::Shape(format!(
                "sequence of {} tokens exceeds max_len {}",
                tokens.len(),
                self.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(ToySimError::Shape(format!(
                "token {bad} outside vocabulary of {}",
                self.vocab
            )));
        }
        Ok(())
    }

    /// Per-token log-probabilities of a given sequence.
    pub fn token_logprobs(&self, tokens: &[usize]) -> Result<Vec<f64>, ToySimError> {
        let states = self.states_for(tokens)?;
        Ok(states
            .iter()
            .zip(tokens)
            .map(|(&s, &t)| self.log_probs(s)[t])
            .collect())
    }

    /// Samples one sequence, returning tokens and their log-probabilities.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<usize>, Vec<f64>) {
        let mut tokens = Vec::new();
        let mut logps = Vec::new();
        let mut prev = None;
        for pos in 0..self.max_len {
            let state = self.state(pos, prev);
            let probs = self.probs(state);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut tok = self.vocab - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    tok = i;
                    break;
                }
            }
            // guard against rounding leaving `acc` just below `u`
            while probs[tok] == 0.0 && tok > 0 {
                tok -= 1;
            }
            tokens.push(tok);
            logps.push(self.log_probs(state)[tok]);
            if Some(tok) == self.eos {
                break;
            }
            prev = Some(tok);
        }
        (tokens, logps)
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().all(|l| l.is_finite())
    }

    /// `logits += step * direction`.
    pub fn step(&mut self, direction: &[f64], step: f64) -> Result<(), ToySimError> {
        if direction.len() != self.logits.len() {
            return Err(ToySimError::Shape(format!(
                "update of length {} for {} logits",
                direction.len(),
                self.logits.len()
            )));
        }
        for (l, d) in self.logits.iter_mut().zip(direction) {
            *l += step * d;
        }
        Ok(())
    }

    /// Accumulates `weight * d log pi(tokens) / d logits` into `grad`.
    pub fn accumulate_logprob_grad(
        &self,
        tokens: &[usize],
        weight: f64,
        grad: &mut [f64],
    ) -> Result<(), ToySimError> {
        if grad.len() != self.logits.len() {
            return Err(ToySimError::Shape(format!(
                "gradient buffer of length {} for {} logits",
                grad.len(),
                self.logits.len()
            )));
        }
        if weight == 0.0 {
            return self.check_tokens(tokens);
        }
        for (state, &tok) in self.states_for(tokens)?.into_iter().zip(tokens) {
            let probs = self.probs(state);
            let row = &mut grad[state * self.vocab..(state + 1) * self.vocab];
            for (v, (g, p)) in row.iter_mut().zip(probs).enumerate() {
                let indicator = if v == tok { 1.0 } else { 0.0 };
                *g += weight * (indicator - p);
            }
        }
        Ok(())
    }
}
