use crate::lexicon::edit_distance;
use crate::{Error, Result};

/// `1 − lev(pred, truth) / max(|pred|, |truth|)`.
pub fn char_accuracy(pred: &str, truth: &str) -> Result<f64> {
    let n = truth.chars().count();
    if n == 0 {
        return Err(Error::Contract("character accuracy needs a non-empty truth".into()));
    }
    let m = n.max(pred.chars().count());
    Ok(1.0 - edit_distance(pred, truth) as f64 / m as f64)
}

/// Mean [`char_accuracy`] over pairs.
pub fn mean_char_accuracy<P: AsRef<str>, Q: AsRef<str>>(pairs: &[(P, Q)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("accuracy over an empty set".into()));
    }
    let mut total = 0.0;
    for (p, t) in pairs {
        total += char_accuracy(p.as_ref(), t.as_ref())?;
    }
    Ok(total / pairs.len() as f64)
}

/// Fraction of exact matches.
pub fn word_accuracy<P: AsRef<str>, Q: AsRef<str>>(pairs: &[(P, Q)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("accuracy over an empty set".into()));
    }
    let hits = pairs.iter().filter(|(p, t)| p.as_ref() == t.as_ref()).count();
    Ok(hits as f64 / pairs.len() as f64)
}
