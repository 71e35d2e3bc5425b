use super::bitmap::Bitmap;
use super::dataset::Sample;
use super::vocab::{TokenId, PAD};
use crate::error::{Error, Result};

/// Samples padded to a shared canvas and target length.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub height: usize,
    pub width: usize,
    /// Images on the shared canvas, zero ink in the padding.
    pub images: Vec<Bitmap>,
    /// 1 on real pixels, 0 on padding.
    pub masks: Vec<Bitmap>,
    /// Targets padded with the pad marker to the longest target.
    pub targets: Vec<Vec<TokenId>>,
    /// 1 on real tokens, 0 on padding.
    pub token_masks: Vec<Vec<u8>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Unpadded target of member `i`.
    pub fn target(&self, i: usize) -> &[TokenId] {
        let n = self.token_masks[i].iter().filter(|&&m| m == 1).count();
        &self.targets[i][..n]
    }

    pub fn from_samples(samples: &[&Sample]) -> Batch {
        let height = samples.iter().map(|s| s.image.height).max().unwrap_or(0);
        let width = samples.iter().map(|s| s.image.width).max().unwrap_or(0);
        let t_max = samples.iter().map(|s| s.target.len()).max().unwrap_or(0);
        let mut b = Batch {
            ids: Vec::with_capacity(samples.len()),
            height,
            width,
            images: Vec::with_capacity(samples.len()),
            masks: Vec::with_capacity(samples.len()),
            targets: Vec::with_capacity(samples.len()),
            token_masks: Vec::with_capacity(samples.len()),
        };
        for s in samples {
            b.ids.push(s.id.clone());
            b.images.push(s.image.padded(height, width));
            let mut full = s.image.clone();
            full.data.iter_mut().for_each(|v| *v = 1.0);
            b.masks.push(full.padded(height, width));
            let mut t = s.target.clone();
            t.resize(t_max, PAD);
            b.targets.push(t);
            let mut m = vec![1u8; s.target.len()];
            m.resize(t_max, 0);
            b.token_masks.push(m);
        }
        b
    }
}

/// Groups samples into batches. With `sort_by_length` samples are first
/// ordered by target length (ties by id) to reduce padding.
pub fn make_batches(samples: &[Sample], batch_size: usize, sort_by_length: bool) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut refs: Vec<&Sample> = samples.iter().collect();
    if sort_by_length {
        refs.sort_by(|a, b| a.target.len().cmp(&b.target.len()).then_with(|| a.id.cmp(&b.id)));
    }
    Ok(refs.chunks(batch_size).map(Batch::from_samples).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, h: usize, w: usize, target: Vec<TokenId>) -> Sample {
        let mut img = Bitmap::new(h, w);
        img.data.iter_mut().for_each(|v| *v = 0.5);
        Sample::new(id, img, target).unwrap()
    }

    #[test]
    fn singleton_has_no_padding() {
        let s = sample("a", 4, 5, vec![3, 4]);
        let b = make_batches(std::slice::from_ref(&s), 4, false).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].images[0], s.image);
        assert!(b[0].masks[0].data.iter().all(|&v| v == 1.0));
        assert_eq!(b[0].token_masks[0], vec![1, 1]);
    }

    #[test]
    fn canvas_is_max_extent() {
        let s = vec![sample("a", 32, 32, vec![3]), sample("b", 32, 48, vec![3, 4, 5])];
        let b = &make_batches(&s, 2, false).unwrap()[0];
        assert_eq!((b.height, b.width), (32, 48));
        assert_eq!(b.masks[0].get(0, 31), 1.0);
        assert_eq!(b.masks[0].get(0, 32), 0.0);
        assert_eq!(b.images[0].get(5, 40), 0.0);
        assert_eq!(b.targets[0], vec![3, PAD, PAD]);
        assert_eq!(b.target(0), &[3]);
        let mask_sum: usize = b.token_masks.iter().flatten().map(|&m| m as usize).sum();
        assert_eq!(mask_sum, 4);
    }

    #[test]
    fn sorting_and_chunking() {
        let s = vec![sample("a", 2, 2, vec![3, 3, 3]), sample("b", 2, 2, vec![3]), sample("c", 2, 2, vec![3, 3])];
        let b = make_batches(&s, 2, true).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].ids, vec!["b", "c"]);
        assert!(make_batches(&s, 0, false).is_err());
    }
}
