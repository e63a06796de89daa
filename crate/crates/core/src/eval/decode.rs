use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Next-token log-probabilities given the tokens so far.
pub trait Scorer {
    fn vocab(&self) -> usize;
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    /// Generated tokens, excluding the start prefix.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
}

/// Higher log-probability first, then the lexicographically smaller sequence.
fn better(a: &Decoded, b: &Decoded) -> Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn finished(tokens: &[u32], end: Option<u32>, max_len: usize) -> bool {
    tokens.len() >= max_len || (end.is_some() && tokens.last().copied() == end)
}

fn with_start(start: &[u32], tokens: &[u32]) -> Vec<u32> {
    start.iter().chain(tokens).copied().collect()
}

/// Length-bounded beam search.
///
/// A hypothesis completes when it emits `end` or reaches `max_len` tokens.
/// Each round expands every live beam over the whole vocabulary and walks the
/// candidates best first, collecting completed ones until `beam` live ones are
/// kept. Search stops once the best completed hypothesis scores at least as
/// high as the best live one, since extending only lowers the score.
pub fn beam_decode(scorer: &mut dyn Scorer, start: &[u32], end: Option<u32>, beam: usize, max_len: usize) -> Result<Decoded> {
    let beam = beam.max(1);
    let mut live = vec![Decoded {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut done: Vec<Decoded> = Vec::new();
    if max_len == 0 {
        return Ok(live.pop().unwrap());
    }
    while !live.is_empty() {
        let mut candidates = Vec::with_capacity(live.len() * scorer.vocab());
        for h in &live {
            let lp = scorer.log_probs(&with_start(start, &h.tokens))?;
            for (tok, &l) in lp.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(tok as u32);
                candidates.push(Decoded {
                    tokens,
                    log_prob: h.log_prob + l,
                });
            }
        }
        candidates.sort_by(better);
        live.clear();
        for c in candidates {
            if live.len() == beam {
                break;
            }
            if finished(&c.tokens, end, max_len) {
                done.push(c);
            } else {
                live.push(c);
            }
        }
        done.sort_by(better);
        if let (Some(best), Some(top)) = (done.first(), live.first()) {
            if best.log_prob >= top.log_prob {
                break;
            }
        }
    }
    Ok(done.into_iter().next().expect("beam search completes at least one hypothesis"))
}

/// Argmax decoding, ties by smaller token id.
pub fn greedy_decode(scorer: &mut dyn Scorer, start: &[u32], end: Option<u32>, max_len: usize) -> Result<Decoded> {
    let mut out = Decoded {
        tokens: Vec::new(),
        log_prob: 0.0,
    };
    while !finished(&out.tokens, end, max_len) {
        let lp = scorer.log_probs(&with_start(start, &out.tokens))?;
        let mut best = 0;
        for (t, &l) in lp.iter().enumerate() {
            if l > lp[best] {
                best = t;
            }
        }
        out.tokens.push(best as u32);
        out.log_prob += lp[best];
    }
    Ok(out)
}

/// Scores every completable sequence; the reference for small vocabularies.
pub fn exhaustive_decode(scorer: &mut dyn Scorer, start: &[u32], end: Option<u32>, max_len: usize) -> Result<Decoded> {
    let mut best: Option<Decoded> = None;
    let mut stack = vec![Decoded {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    while let Some(h) = stack.pop() {
        if finished(&h.tokens, end, max_len) {
            if best.as_ref().is_none_or(|b| better(&h, b) == Ordering::Less) {
                best = Some(h);
            }
            continue;
        }
        let lp = scorer.log_probs(&with_start(start, &h.tokens))?;
        for (tok, &l) in lp.iter().enumerate() {
            let mut tokens = h.tokens.clone();
            tokens.push(tok as u32);
            stack.push(Decoded {
                tokens,
                log_prob: h.log_prob + l,
            });
        }
    }
    Ok(best.expect("at least one sequence"))
}

/// Log-probability a scorer assigns to a given continuation.
pub fn sequence_log_prob(scorer: &mut dyn Scorer, start: &[u32], tokens: &[u32]) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..tokens.len() {
        let lp = scorer.log_probs(&with_start(start, &tokens[..i]))?;
        total += lp[tokens[i] as usize];
    }
    Ok(total)
}

/// Normalizes raw logits into log-probabilities.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|&l| l - z).collect()
}
