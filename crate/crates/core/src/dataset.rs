use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::representation::Sequence;

/// Per-fidelity `(sequence, score)` lists, unique within each fidelity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Levels", into = "Levels")]
pub struct MultiFidelityDataset {
    levels: Vec<Vec<(Sequence, f64)>>,
    seen: Vec<BTreeSet<Sequence>>,
}

#[derive(Serialize, Deserialize)]
struct Levels(Vec<Vec<(Sequence, f64)>>);

impl From<Levels> for MultiFidelityDataset {
    fn from(l: Levels) -> Self {
        let seen = l.0.iter().map(|v| v.iter().map(|(x, _)| x.clone()).collect()).collect();
        Self { levels: l.0, seen }
    }
}

impl From<MultiFidelityDataset> for Levels {
    fn from(d: MultiFidelityDataset) -> Self {
        Levels(d.levels)
    }
}

impl MultiFidelityDataset {
    pub fn new(fidelities: usize) -> Self {
        Self { levels: vec![Vec::new(); fidelities], seen: vec![BTreeSet::new(); fidelities] }
    }

    pub fn fidelities(&self) -> usize {
        self.levels.len()
    }

    fn check(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.levels.len() {
            return Err(Error::FidelityOutOfRange { k, max: self.levels.len() });
        }
        Ok(())
    }

    /// Appends unless `x` is already present at `k`; returns whether it was added.
    pub fn push(&mut self, k: usize, x: Sequence, y: f64) -> Result<bool> {
        self.check(k)?;
        if !y.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite score {y}")));
        }
        if !self.seen[k - 1].insert(x.clone()) {
            return Ok(false);
        }
        self.levels[k - 1].push((x, y));
        Ok(true)
    }

    pub fn contains(&self, k: usize, x: &Sequence) -> bool {
        self.seen.get(k.wrapping_sub(1)).is_some_and(|s| s.contains(x))
    }

    pub fn count(&self, k: usize) -> usize {
        self.levels.get(k.wrapping_sub(1)).map_or(0, Vec::len)
    }

    pub fn counts(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }

    pub fn level(&self, k: usize) -> &[(Sequence, f64)] {
        &self.levels[k - 1]
    }

    pub fn scores(&self, k: usize) -> Vec<f64> {
        self.levels[k - 1].iter().map(|(_, y)| *y).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::representation::Alphabet;

    #[test]
    fn dedup_within_fidelity_only() {
        let a = Alphabet::with_size(4).unwrap();
        let x = Sequence::parse("ABC", &a).unwrap();
        let mut d = MultiFidelityDataset::new(2);
        assert!(d.push(1, x.clone(), 1.0).unwrap());
        assert!(!d.push(1, x.clone(), 2.0).unwrap());
        assert!(d.push(2, x.clone(), 3.0).unwrap());
        assert_eq!(d.counts(), vec![1, 1]);
        assert!(d.push(3, x.clone(), 0.0).is_err());
        assert!(d.push(1, Sequence::parse("AAA", &a).unwrap(), f64::NAN).is_err());
        assert!(d.contains(2, &x) && !d.contains(0, &x) && !d.contains(5, &x));
    }

    #[test]
    fn serde_rebuilds_index() {
        let a = Alphabet::with_size(4).unwrap();
        let mut d = MultiFidelityDataset::new(1);
        d.push(1, Sequence::parse("AB", &a).unwrap(), 1.0).unwrap();
        let json = serde_json::to_string(&d).unwrap();
        let back: MultiFidelityDataset = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
        assert!(back.contains(1, &Sequence::parse("AB", &a).unwrap()));
    }
}
