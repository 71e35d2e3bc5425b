use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bitmap::Bitmap;
use super::synth::SynthSample;
use super::vocab::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};

/// One labelled expression image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Bitmap,
    pub target: TokenSequence,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Bitmap, target: TokenSequence) -> Result<Self> {
        let id = id.into();
        if target.is_empty() {
            return Err(Error::Input(format!("sample {id} has an empty target")));
        }
        if image.is_empty() {
            return Err(Error::Input(format!("sample {id} has an empty image")));
        }
        Ok(Sample { id, image, target })
    }
}

/// Parses `<id>\t<token> <token> ...` lines into `(id, tokens)` pairs.
pub fn parse_labels(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.split('\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::Input(format!("label line {}: missing TAB after the id", n + 1)))?;
        if id.is_empty() || label.is_empty() {
            return Err(Error::Input(format!("label line {}: empty id or label", n + 1)));
        }
        out.push((id.to_string(), label.to_string()));
    }
    Ok(out)
}

fn image_path(image_dir: &Path, id: &str) -> Option<std::path::PathBuf> {
    ["png", "pgm"]
        .iter()
        .map(|ext| image_dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

/// Loads samples in label-file order. Images are `<id>.png` or `<id>.pgm`
/// inside `image_dir`.
pub fn load_dataset(image_dir: &Path, label_file: &Path, vocab: &Vocabulary) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(label_file).map_err(|e| Error::io(label_file, e))?;
    let mut samples = Vec::new();
    for (n, (id, label)) in parse_labels(&text)?.into_iter().enumerate() {
        let target = vocab.tokenize(&label).map_err(|e| match e {
            Error::Vocabulary(m) => Error::Vocabulary(format!("label line {} ({id}): {m}", n + 1)),
            other => other,
        })?;
        let path = image_path(image_dir, &id).ok_or_else(|| {
            Error::io(
                image_dir.join(format!("{id}.png")),
                std::io::Error::new(std::io::ErrorKind::NotFound, format!("no image for sample {id}")),
            )
        })?;
        samples.push(Sample::new(id, Bitmap::load(&path)?, target)?);
    }
    Ok(samples)
}

/// Dataset layout on disk: `images/<id>.png`, `labels.txt`, `vocab.txt`.
pub struct DatasetPaths {
    pub images: std::path::PathBuf,
    pub labels: std::path::PathBuf,
    pub vocab: std::path::PathBuf,
}

impl DatasetPaths {
    pub fn new(root: &Path) -> Self {
        DatasetPaths {
            images: root.join("images"),
            labels: root.join("labels.txt"),
            vocab: root.join("vocab.txt"),
        }
    }
}

/// Writes generated samples and their vocabulary under `root`.
pub fn write_synthetic(root: &Path, samples: &[SynthSample], vocab: &Vocabulary) -> Result<()> {
    let paths = DatasetPaths::new(root);
    fs::create_dir_all(&paths.images).map_err(|e| Error::io(&paths.images, e))?;
    let mut labels = String::new();
    for s in samples {
        s.image.save(&paths.images.join(format!("{}.png", s.id)))?;
        labels.push_str(&s.id);
        labels.push('\t');
        labels.push_str(&s.tokens.join(" "));
        labels.push('\n');
    }
    fs::write(&paths.labels, labels).map_err(|e| Error::io(&paths.labels, e))?;
    vocab.save(&paths.vocab)
}

/// Loads a dataset directory written by [`write_synthetic`] (or laid out the
/// same way), with its vocabulary.
pub fn load_dir(root: &Path) -> Result<(Vocabulary, Vec<Sample>)> {
    let paths = DatasetPaths::new(root);
    let vocab = Vocabulary::load(&paths.vocab)?;
    let samples = load_dataset(&paths.images, &paths.labels, &vocab)?;
    Ok((vocab, samples))
}

/// Converts generated samples to tokenized samples.
pub fn from_synthetic(samples: &[SynthSample], vocab: &Vocabulary) -> Result<Vec<Sample>> {
    samples
        .iter()
        .map(|s| Sample::new(s.id.clone(), s.image.clone(), vocab.tokenize(&s.tokens.join(" "))?))
        .collect()
}

/// Deterministic `(train, validation)` split; the validation share is rounded
/// but never takes every sample.
pub fn split(samples: &[Sample], validation_fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((samples.len() as f64 * validation_fraction).round() as usize).min(samples.len().saturating_sub(1));
    let (val, train) = idx.split_at(n_val);
    let mut train = train.to_vec();
    let mut val = val.to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (
        train.iter().map(|&i| samples[i].clone()).collect(),
        val.iter().map(|&i| samples[i].clone()).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{gen_synthetic, synthetic_vocabulary, SynthConfig};

    #[test]
    fn label_parsing() {
        let v = Vocabulary::new(&["x", "+", "1"]).unwrap();
        let pairs = parse_labels("ex1\tx + 1\n").unwrap();
        assert_eq!(pairs, vec![("ex1".to_string(), "x + 1".to_string())]);
        assert_eq!(v.tokenize(&pairs[0].1).unwrap().len(), 3);
        assert!(parse_labels("").unwrap().is_empty());
        assert!(parse_labels("ex1 x").is_err());
    }

    #[test]
    fn empty_label_file_gives_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let labels = dir.path().join("labels.txt");
        fs::write(&labels, "").unwrap();
        let v = Vocabulary::new(&["x"]).unwrap();
        assert!(load_dataset(dir.path(), &labels, &v).unwrap().is_empty());
    }

    #[test]
    fn errors_name_the_offending_line() {
        let dir = tempfile::tempdir().unwrap();
        let labels = dir.path().join("labels.txt");
        let v = Vocabulary::new(&["x"]).unwrap();
        fs::write(&labels, "a\tx\n").unwrap();
        let err = load_dataset(dir.path(), &labels, &v).unwrap_err();
        assert!(matches!(err, Error::Io { .. }) && err.to_string().contains("a.png"));
        Bitmap::new(2, 2).save(&dir.path().join("a.pgm")).unwrap();
        fs::write(&labels, "a\tx\na\tx q\n").unwrap();
        let err = load_dataset(dir.path(), &labels, &v).unwrap_err();
        assert!(matches!(err, Error::Vocabulary(ref m) if m.contains("line 2") && m.contains("\"q\"")));
    }

    #[test]
    fn synthetic_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = synthetic_vocabulary();
        let gen = gen_synthetic(&SynthConfig::default(), 6, 4).unwrap();
        write_synthetic(dir.path(), &gen, &vocab).unwrap();
        let (v2, loaded) = load_dir(dir.path()).unwrap();
        assert_eq!(v2, vocab);
        assert_eq!(loaded, from_synthetic(&gen, &vocab).unwrap());
        let text = fs::read_to_string(dir.path().join("labels.txt")).unwrap();
        for ((_, label), s) in parse_labels(&text).unwrap().iter().zip(&loaded) {
            assert_eq!(&vocab.detokenize(&s.target).unwrap(), label);
        }
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let vocab = synthetic_vocabulary();
        let s = from_synthetic(&gen_synthetic(&SynthConfig::default(), 20, 1).unwrap(), &vocab).unwrap();
        let (t1, v1) = split(&s, 0.1, 5);
        let (t2, v2) = split(&s, 0.1, 5);
        assert_eq!((t1.len(), v1.len()), (18, 2));
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
        assert!(v1.iter().all(|x| !t1.iter().any(|y| y.id == x.id)));
        let (t, v) = split(&s[..1], 0.9, 5);
        assert_eq!((t.len(), v.len()), (1, 0));
    }
}
