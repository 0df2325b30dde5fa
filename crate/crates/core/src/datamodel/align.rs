use super::{Dataset, EvidenceRecord, ImageRecord};
use crate::error::{Error, Result};

/// Attaches the `top_k` most similar images to every evidence text that has
/// none. Ties go to the lexicographically smaller image id; evidence that
/// already has images is left alone, so the operation is idempotent.
pub fn align_images<F>(d: &Dataset, sim: F, top_k: usize) -> Result<Dataset>
where
    F: Fn(&EvidenceRecord, &ImageRecord) -> f64,
{
    if top_k == 0 {
        return Err(Error::InvalidConfig("top_k must be at least 1".into()));
    }
    let pending = d.evidence.iter().filter(|e| e.image_ids.is_empty()).count();
    if pending == 0 {
        return Ok(d.clone());
    }
    if d.images.is_empty() {
        return Err(Error::EmptyImagePool(pending));
    }
    let mut out = d.clone();
    for ev in out.evidence.iter_mut().filter(|e| e.image_ids.is_empty()) {
        let mut scored: Vec<(f64, &str)> = d
            .images
            .iter()
            .map(|img| (sim(ev, img), img.id.as_str()))
            .collect();
        if let Some((s, id)) = scored.iter().find(|(s, _)| !s.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "similarity of {} and {id} is not finite ({s})",
                ev.id
            )));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        ev.image_ids = scored
            .into_iter()
            .take(top_k)
            .map(|(_, id)| id.to_string())
            .collect();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{label_set, ImageRecord};
    use image::RgbImage;

    fn corpus(with_images: bool) -> Dataset {
        Dataset {
            evidence: vec![EvidenceRecord {
                id: "e1".into(),
                text: "t".into(),
                image_ids: if with_images { vec!["i2".into()] } else { vec![] },
            }],
            images: ["i5", "i3", "i1", "i4", "i2"]
                .iter()
                .map(|id| ImageRecord::new(*id, RgbImage::new(4, 4)))
                .collect(),
            label_set: label_set(false),
            ..Default::default()
        }
    }

    #[test]
    fn already_aligned_is_untouched() {
        let d = corpus(true);
        assert_eq!(align_images(&d, |_, _| 1.0, 3).unwrap(), d);
    }

    #[test]
    fn constant_similarity_picks_smallest_id() {
        let d = align_images(&corpus(false), |_, _| 0.5, 1).unwrap();
        assert_eq!(d.evidence[0].image_ids, vec!["i1"]);
    }

    #[test]
    fn indicator_similarity_then_tie_break() {
        let d = align_images(&corpus(false), |_, img| f64::from(img.id == "i3"), 3).unwrap();
        assert_eq!(d.evidence[0].image_ids, vec!["i3", "i1", "i2"]);
    }

    #[test]
    fn empty_pool_is_an_error() {
        let mut d = corpus(false);
        d.images.clear();
        assert!(matches!(align_images(&d, |_, _| 0.0, 3), Err(Error::EmptyImagePool(1))));
    }

    #[test]
    fn alignment_is_idempotent() {
        let sim = |e: &EvidenceRecord, i: &ImageRecord| (e.id.len() * i.id.len()) as f64;
        let once = align_images(&corpus(false), sim, 2).unwrap();
        assert_eq!(align_images(&once, sim, 2).unwrap(), once);
    }
}
