//! Discrete design space: fixed-length token sequences over a small alphabet.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Ordered set of single-character tokens with one designated padding symbol.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    symbols: Vec<char>,
    pad: usize,
}

impl Alphabet {
    pub fn new(symbols: Vec<char>, pad: usize) -> Result<Self> {
        if symbols.len() < 2 {
            return Err(Error::InvalidArgument("alphabet needs at least 2 symbols".into()));
        }
        if pad >= symbols.len() {
            return Err(Error::InvalidArgument(format!(
                "pad index {pad} outside alphabet of size {}",
                symbols.len()
            )));
        }
        let distinct: BTreeSet<char> = symbols.iter().copied().collect();
        if distinct.len() != symbols.len() {
            return Err(Error::InvalidArgument("alphabet symbols must be distinct".into()));
        }
        Ok(Self { symbols, pad })
    }

    /// `_` (pad, index 0) followed by `A`, `B`, ... up to `size` symbols.
    pub fn with_size(size: usize) -> Result<Self> {
        if !(2..=27).contains(&size) {
            return Err(Error::InvalidArgument(format!("alphabet size {size} not in 2..=27")));
        }
        let symbols = std::iter::once('_').chain(('A'..='Z').take(size - 1)).collect();
        Self::new(symbols, 0)
    }

    pub fn parse(symbols: &str, pad: char) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        let pad = symbols
            .iter()
            .position(|&c| c == pad)
            .ok_or(Error::UnknownSymbol(pad))?;
        Self::new(symbols, pad)
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn symbol(&self, id: usize) -> char {
        self.symbols[id]
    }

    pub fn index_of(&self, c: char) -> Result<usize> {
        self.symbols.iter().position(|&s| s == c).ok_or(Error::UnknownSymbol(c))
    }
}

/// A design: `L` token ids, padded with the alphabet's pad symbol.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sequence(Vec<usize>);

impl Sequence {
    pub fn new(ids: Vec<usize>, alphabet: &Alphabet) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidSequence("empty sequence".into()));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= alphabet.size()) {
            return Err(Error::InvalidToken { id, size: alphabet.size() });
        }
        Ok(Self(ids))
    }

    pub fn padding(alphabet: &Alphabet, length: usize) -> Self {
        Self(vec![alphabet.pad(); length])
    }

    pub fn random<R: Rng + ?Sized>(alphabet: &Alphabet, length: usize, rng: &mut R) -> Self {
        Self((0..length).map(|_| rng.random_range(0..alphabet.size())).collect())
    }

    pub fn parse(s: &str, alphabet: &Alphabet) -> Result<Self> {
        let ids = s.chars().map(|c| alphabet.index_of(c)).collect::<Result<Vec<_>>>()?;
        Self::new(ids, alphabet)
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn render(&self, alphabet: &Alphabet) -> String {
        self.0.iter().map(|&i| alphabet.symbol(i)).collect()
    }

    pub fn display<'a>(&'a self, alphabet: &'a Alphabet) -> impl fmt::Display + 'a {
        struct D<'a>(&'a Sequence, &'a Alphabet);
        impl fmt::Display for D<'_> {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0.render(self.1))
            }
        }
        D(self, alphabet)
    }

    fn bigrams(&self) -> BTreeSet<(usize, usize)> {
        self.0.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Flattened one-hot encoding, position-major: entry `i * A + x_i` is 1.
pub fn encode_one_hot(x: &Sequence, alphabet: &Alphabet) -> Result<Tensor> {
    let a = alphabet.size();
    let mut data = vec![0.0; x.len() * a];
    for (i, &id) in x.ids().iter().enumerate() {
        if id >= a {
            return Err(Error::InvalidToken { id, size: a });
        }
        data[i * a + id] = 1.0;
    }
    Ok(Tensor::vector(data))
}

/// Stacks one-hot encodings into a `[B, L * A]` matrix.
pub fn encode_batch(xs: &[&Sequence], alphabet: &Alphabet) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let width = first.len() * alphabet.size();
    let mut data = Vec::with_capacity(xs.len() * width);
    for x in xs {
        if x.len() != first.len() {
            return Err(Error::InvalidSequence("mixed lengths in batch".into()));
        }
        data.extend(encode_one_hot(x, alphabet)?.into_data());
    }
    Tensor::matrix(xs.len(), width, data)
}

/// Draws a sequence from per-position logits (`[L, A]` or flat `[L * A]`).
///
/// `temperature == 0` takes the argmax of each position (first index wins
/// ties); otherwise samples from `softmax(logits / temperature)`.
pub fn decode_sample<R: Rng + ?Sized>(
    logits: &Tensor,
    alphabet: &Alphabet,
    temperature: f64,
    rng: &mut R,
) -> Result<Sequence> {
    decode_rows(logits, alphabet, temperature, &mut || rng.random::<f64>())
}

pub fn decode_greedy(logits: &Tensor, alphabet: &Alphabet) -> Result<Sequence> {
    decode_rows(logits, alphabet, 0.0, &mut || 0.0)
}

fn decode_rows(
    logits: &Tensor,
    alphabet: &Alphabet,
    temperature: f64,
    uniform: &mut dyn FnMut() -> f64,
) -> Result<Sequence> {
    let a = alphabet.size();
    if logits.len() % a != 0 || (logits.rank() == 2 && logits.last_dim() != a) {
        return Err(Error::Shape {
            op: "decode_sample",
            detail: format!("logits {:?} for alphabet of size {a}", logits.shape()),
        });
    }
    if !(temperature >= 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} < 0")));
    }
    if logits.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NanLogits);
    }
    let ids = logits
        .data()
        .chunks(a)
        .map(|row| {
            if temperature == 0.0 {
                argmax(row)
            } else {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = row.iter().map(|v| ((v - mx) / temperature).exp()).collect();
                let total: f64 = w.iter().sum();
                let mut u = uniform() * total;
                for (j, wj) in w.iter().enumerate() {
                    if u < *wj {
                        return j;
                    }
                    u -= wj;
                }
                argmax(row)
            }
        })
        .collect();
    Sequence::new(ids, alphabet)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Jaccard similarity of the two sequences' token-bigram sets.
pub fn fingerprint_similarity(a: &Sequence, b: &Sequence) -> f64 {
    let (sa, sb) = (a.bigrams(), b.bigrams());
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Mean of [`fingerprint_similarity`] over unordered distinct pairs.
pub fn mean_pairwise_similarity(xs: &[Sequence]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..xs.len() {
        for j in (i + 1)..xs.len() {
            total += fingerprint_similarity(&xs[i], &xs[j]);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn abc(n: usize) -> Alphabet {
        Alphabet::with_size(n).unwrap()
    }

    #[test]
    fn one_hot_definition() {
        let al = abc(2);
        let x = Sequence::new(vec![0, 1], &al).unwrap();
        assert_eq!(encode_one_hot(&x, &al).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn all_pad_one_hot() {
        let al = abc(4);
        let x = Sequence::padding(&al, 3);
        let t = encode_one_hot(&x, &al).unwrap();
        for i in 0..3 {
            assert_eq!(t.data()[i * 4 + al.pad()], 1.0);
        }
        assert_eq!(t.data().iter().sum::<f64>(), 3.0);
    }

    #[test]
    fn invalid_token_rejected() {
        let al = abc(3);
        assert!(matches!(Sequence::new(vec![0, 3], &al), Err(Error::InvalidToken { id: 3, .. })));
        assert!(Sequence::parse("A?", &al).is_err());
    }

    #[test]
    fn greedy_decoding_is_argmax() {
        let al = abc(3);
        let logits = Tensor::matrix(2, 3, vec![0.1, 2.0, -1.0, 5.0, 0.0, 4.9]).unwrap();
        let x = decode_greedy(&logits, &al).unwrap();
        assert_eq!(x.ids(), &[1, 0]);
    }

    #[test]
    fn nan_logits_rejected() {
        let al = abc(2);
        let logits = Tensor::vector(vec![0.0, f64::NAN]);
        assert!(matches!(decode_greedy(&logits, &al), Err(Error::NanLogits)));
    }

    #[test]
    fn sampling_reproducible_under_seed() {
        let al = abc(6);
        let logits = Tensor::randn(&[8, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let a = decode_sample(&logits, &al, 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = decode_sample(&logits, &al, 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_logits_sample_uniformly() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let al = abc(5);
        let logits = Tensor::zeros(&[1, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut counts = [0usize; 5];
        let n = 10_000;
        for _ in 0..n {
            counts[decode_sample(&logits, &al, 1.0, &mut rng).unwrap().ids()[0]] += 1;
        }
        let expected = n as f64 / 5.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(4.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2}, p {p}, counts {counts:?}");
    }

    #[test]
    fn similarity_examples() {
        let al = abc(6);
        let a = Sequence::new(vec![0, 1, 2, 3], &al).unwrap();
        let b = Sequence::new(vec![0, 1, 2, 4], &al).unwrap();
        assert_eq!(fingerprint_similarity(&a, &a), 1.0);
        assert_eq!(fingerprint_similarity(&a, &b), 0.5);
        let c = Sequence::new(vec![5, 5, 4, 4], &al).unwrap();
        assert_eq!(fingerprint_similarity(&a, &c), 0.0);
    }

    #[test]
    fn render_and_parse() {
        let al = abc(12);
        let x = Sequence::parse("AB_K", &al).unwrap();
        assert_eq!(x.render(&al), "AB_K");
        assert_eq!(x.display(&al).to_string(), "AB_K");
    }

    proptest! {
        #[test]
        fn one_hot_round_trip(ids in proptest::collection::vec(0usize..7, 1..12)) {
            let al = abc(7);
            let x = Sequence::new(ids, &al).unwrap();
            let t = encode_one_hot(&x, &al).unwrap();
            prop_assert_eq!(t.data().iter().sum::<f64>(), x.len() as f64);
            prop_assert_eq!(decode_greedy(&t, &al).unwrap(), x);
        }

        #[test]
        fn similarity_symmetric_and_bounded(
            a in proptest::collection::vec(0usize..5, 6),
            b in proptest::collection::vec(0usize..5, 6),
        ) {
            let al = abc(5);
            let (a, b) = (Sequence::new(a, &al).unwrap(), Sequence::new(b, &al).unwrap());
            let s = fingerprint_similarity(&a, &b);
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(s, fingerprint_similarity(&b, &a));
        }

        #[test]
        fn greedy_decoding_deterministic(v in proptest::collection::vec(-5.0f64..5.0, 12)) {
            let al = abc(4);
            let logits = Tensor::matrix(3, 4, v).unwrap();
            prop_assert_eq!(decode_greedy(&logits, &al).unwrap(), decode_greedy(&logits, &al).unwrap());
        }
    }
}
