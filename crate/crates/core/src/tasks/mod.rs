//! Synthetic tasks, character corpora and checkpoint files.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{Rng, Vector};
use crate::sequence::{SequenceSample, Target};

/// Unit basis vector `e_index` of length `k`.
pub fn one_hot(index: usize, k: usize) -> Result<Vector> {
    if index >= k {
        return Err(Error::InvalidArgument(format!(
            "one-hot index {index} out of range for {k} classes"
        )));
    }
    let mut v = Vector::zeros(k);
    v[index] = 1.0;
    Ok(v)
}

/// Copy task: a random symbol in `0..k` at step 0, the filler symbol `k`
/// at every later step, and a single target at step `lag - 1` equal to the
/// first symbol. Inputs have `k + 1` entries, targets `k`.
pub fn make_copy_task(rng: &mut Rng, lag: usize, k: usize, count: usize) -> Result<Vec<SequenceSample>> {
    if lag < 2 || k < 2 {
        return Err(Error::InvalidArgument(format!(
            "copy task needs lag >= 2 and k >= 2, got lag {lag}, k {k}"
        )));
    }
    let filler = one_hot(k, k + 1)?;
    (0..count)
        .map(|_| {
            let symbol = rng.below(k);
            let mut inputs = Vec::with_capacity(lag);
            inputs.push(one_hot(symbol, k + 1)?);
            inputs.extend(std::iter::repeat_n(filler.clone(), lag - 1));
            SequenceSample::new(
                inputs,
                vec![Target {
                    step: lag - 1,
                    y: one_hot(symbol, k)?,
                }],
            )
        })
        .collect()
}

/// Index of the first symbol of a copy-task sample.
pub fn copy_task_symbol(sample: &SequenceSample) -> Option<usize> {
    sample.inputs.first()?.argmax()
}

/// Ordered set of characters with a reverse lookup.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocab {
    /// Distinct characters of `text` in order of first appearance.
    pub fn from_text(text: &str) -> Self {
        let mut symbols = Vec::new();
        let mut index = HashMap::new();
        for ch in text.chars() {
            index.entry(ch).or_insert_with(|| {
                symbols.push(ch);
                symbols.len() - 1
            });
        }
        Self { symbols, index }
    }

    pub fn from_symbols(symbols: Vec<char>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, ch) in symbols.iter().enumerate() {
            if index.insert(*ch, i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary symbol {ch:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn index_of(&self, ch: char) -> Option<usize> {
        self.index.get(&ch).copied()
    }

    pub fn symbol(&self, index: usize) -> Option<char> {
        self.symbols.get(index).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|ch| {
                self.index_of(ch)
                    .ok_or_else(|| Error::InvalidArgument(format!("character {ch:?} is not in the vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, indices: &[usize]) -> Result<String> {
        indices
            .iter()
            .map(|&i| {
                self.symbol(i)
                    .ok_or_else(|| Error::InvalidArgument(format!("index {i} outside vocabulary of {}", self.len())))
            })
            .collect()
    }
}

/// Reads a text file and encodes it character by character.
pub fn load_text_corpus(path: &Path) -> Result<(Vocab, Vec<usize>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.is_empty() {
        return Err(Error::InvalidArgument(format!("corpus {} is empty", path.display())));
    }
    let vocab = Vocab::from_text(&text);
    let indices = vocab.encode(&text)?;
    Ok((vocab, indices))
}

/// Next-symbol pairs: `inputs[i] = seq[i]`, `targets[i] = seq[i + 1]`.
pub fn shift_targets(seq: &[usize]) -> (Vec<usize>, Vec<usize>) {
    if seq.len() < 2 {
        return (Vec::new(), Vec::new());
    }
    (seq[..seq.len() - 1].to_vec(), seq[1..].to_vec())
}

/// Many-to-many training sample over `seq[start .. start + len + 1]`.
pub fn char_window(seq: &[usize], vocab_size: usize, start: usize, len: usize) -> Result<SequenceSample> {
    if len == 0 || start + len + 1 > seq.len() {
        return Err(Error::InvalidArgument(format!(
            "window of {len} at {start} does not fit a corpus of {}",
            seq.len()
        )));
    }
    let (inputs, targets) = shift_targets(&seq[start..start + len + 1]);
    let inputs = inputs.iter().map(|&i| one_hot(i, vocab_size)).collect::<Result<_>>()?;
    let targets = targets
        .iter()
        .enumerate()
        .map(|(step, &i)| {
            Ok(Target {
                step,
                y: one_hot(i, vocab_size)?,
            })
        })
        .collect::<Result<_>>()?;
    SequenceSample::new(inputs, targets)
}

/// `count` windows of length `len` at random offsets.
pub fn sample_char_windows(
    rng: &mut Rng,
    seq: &[usize],
    vocab_size: usize,
    len: usize,
    count: usize,
) -> Result<Vec<SequenceSample>> {
    if seq.len() < len + 1 {
        return Err(Error::InvalidArgument(format!(
            "corpus of {} symbols is too short for windows of {len}",
            seq.len()
        )));
    }
    let span = seq.len() - len;
    (0..count)
        .map(|_| char_window(seq, vocab_size, rng.below(span), len))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Real;
    use std::io::Write;

    #[test]
    fn one_hot_cases() {
        assert_eq!(one_hot(0, 3).unwrap().as_slice(), &[1.0, 0.0, 0.0]);
        assert_eq!(one_hot(2, 3).unwrap().as_slice(), &[0.0, 0.0, 1.0]);
        assert!(one_hot(3, 3).is_err());
        for k in 1..6 {
            for i in 0..k {
                assert_eq!(one_hot(i, k).unwrap().iter().sum::<Real>(), 1.0);
            }
        }
    }

    #[test]
    fn copy_task_structure() {
        let mut rng = Rng::new(1);
        for s in make_copy_task(&mut rng, 2, 4, 50).unwrap() {
            assert_eq!(s.len(), 2);
            assert_eq!(s.targets.len(), 1);
            assert_eq!(s.targets[0].step, 1);
            assert_eq!(s.targets[0].y.argmax(), copy_task_symbol(&s));
        }
        for s in make_copy_task(&mut rng, 6, 3, 20).unwrap() {
            assert!(copy_task_symbol(&s).unwrap() < 3);
            for x in &s.inputs[1..] {
                assert_eq!(x.as_slice(), &[0.0, 0.0, 0.0, 1.0]);
            }
        }
        assert!(make_copy_task(&mut rng, 1, 4, 1).is_err());
        assert!(make_copy_task(&mut rng, 4, 1, 1).is_err());
    }

    #[test]
    fn copy_task_is_seeded() {
        let a = make_copy_task(&mut Rng::new(9), 5, 4, 10).unwrap();
        let b = make_copy_task(&mut Rng::new(9), 5, 4, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn copy_task_classes_are_uniform() {
        let k = 8;
        let n = 10_000;
        let mut counts = vec![0usize; k];
        for s in make_copy_task(&mut Rng::new(2024), 2, k, n).unwrap() {
            counts[copy_task_symbol(&s).unwrap()] += 1;
        }
        let p = 1.0 / k as f64;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 3.0 * sigma, "{c} vs {mean} ± {}", 3.0 * sigma);
        }
    }

    #[test]
    fn vocab_and_shift() {
        let v = Vocab::from_text("aba");
        assert_eq!(v.symbols(), &['a', 'b']);
        let idx = v.encode("aba").unwrap();
        assert_eq!(idx, vec![0, 1, 0]);
        assert_eq!(v.decode(&idx).unwrap(), "aba");
        assert_eq!(shift_targets(&idx), (vec![0, 1], vec![1, 0]));
        assert!(v.encode("abc").is_err());
        assert!(v.decode(&[2]).is_err());
        assert!(Vocab::from_symbols(vec!['x', 'x']).is_err());
    }

    #[test]
    fn corpus_loading() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "héllo wörld").unwrap();
        let (v, idx) = load_text_corpus(f.path()).unwrap();
        assert_eq!(v.decode(&idx).unwrap(), "héllo wörld\n");

        let empty = tempfile::NamedTempFile::new().unwrap();
        assert!(load_text_corpus(empty.path()).is_err());
        assert!(matches!(
            load_text_corpus(Path::new("/definitely/not/here.txt")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn char_windows() {
        let v = Vocab::from_text("abcab");
        let seq = v.encode("abcab").unwrap();
        let s = char_window(&seq, v.len(), 1, 3).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.inputs[0].argmax(), Some(1));
        assert_eq!(s.targets[2].y.argmax(), Some(1));
        assert!(char_window(&seq, v.len(), 2, 3).is_err());
        let ws = sample_char_windows(&mut Rng::new(0), &seq, v.len(), 4, 5).unwrap();
        assert!(ws.iter().all(|w| w.len() == 4));
    }

    proptest::proptest! {
        #[test]
        fn encode_decode_roundtrip(text in "\\PC{1,64}") {
            let v = Vocab::from_text(&text);
            proptest::prop_assert_eq!(v.decode(&v.encode(&text).unwrap()).unwrap(), text);
        }
    }
}
