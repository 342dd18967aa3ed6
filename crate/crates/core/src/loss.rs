//! Multi-dataset segmentation loss.
//!
//! Set-A pixels are scored for every sample; set-B pixels only for samples
//! from the standard dataset. Each sample contributes a weighted mean cross
//! entropy and the batch loss is the mean over samples.

use rfnet_autodiff::{Tape, Var};

use crate::error::{data, Result};
use crate::labels::{LabelMap, IGNORE_ID};
use crate::taxonomy::{ClassSet, LabelTaxonomy};

/// 1 for samples from the standard dataset, 0 otherwise.
pub fn lambda_select(source: &str, taxonomy: &LabelTaxonomy) -> Result<u8> {
    Ok(taxonomy.dataset(source)?.standard as u8)
}

/// Maps raw dataset labels into the unified id space.
pub fn remap_labels(raw: &LabelMap, source: &str, taxonomy: &LabelTaxonomy) -> Result<LabelMap> {
    let table = taxonomy.remap_table(source)?;
    let mut out = raw.clone();
    for v in out.data.iter_mut() {
        match table.get(v) {
            Some(&u) => *v = u,
            None => return data(format!("{source}: raw label {v} has no remap entry")),
        }
    }
    Ok(out)
}

/// Per-pixel loss weights for one unified label map: 1 on set A, lambda on
/// set B, 0 on ignored pixels.
pub fn pixel_weights(labels: &LabelMap, source: &str, taxonomy: &LabelTaxonomy) -> Result<Vec<f64>> {
    let lambda = lambda_select(source, taxonomy)? as f64;
    labels
        .data
        .iter()
        .map(|&l| {
            if l == IGNORE_ID {
                return Ok(0.0);
            }
            match taxonomy.class_set(l) {
                Some(ClassSet::A) => Ok(1.0),
                Some(ClassSet::B) => Ok(lambda),
                None => data(format!(
                    "label {l} outside the {}-class taxonomy",
                    taxonomy.num_classes()
                )),
            }
        })
        .collect()
}

/// Batch loss for `[N,K,H,W]` logits against unified label maps tagged with
/// their source dataset.
pub fn multisource_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[LabelMap],
    sources: &[&str],
    taxonomy: &LabelTaxonomy,
) -> Result<Var> {
    let dims = tape.dims(logits).to_vec();
    if dims.len() != 4 || dims[0] != labels.len() || labels.len() != sources.len() {
        return data(format!(
            "{} label maps and {} sources for logits {dims:?}",
            labels.len(),
            sources.len()
        ));
    }
    if dims[1] != taxonomy.num_classes() {
        return data(format!(
            "logits carry {} classes, taxonomy has {}",
            dims[1],
            taxonomy.num_classes()
        ));
    }
    let mut flat = Vec::with_capacity(labels.len() * dims[2] * dims[3]);
    let mut weights = Vec::with_capacity(flat.capacity());
    for (map, &src) in labels.iter().zip(sources) {
        if (map.height, map.width) != (dims[2], dims[3]) {
            return data(format!(
                "label map {}x{} vs logits {}x{}",
                map.height, map.width, dims[2], dims[3]
            ));
        }
        weights.extend(pixel_weights(map, src, taxonomy)?);
        flat.extend_from_slice(&map.data);
    }
    Ok(tape.masked_cross_entropy(logits, &flat, &weights, IGNORE_ID)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tax() -> LabelTaxonomy {
        LabelTaxonomy::parse(
            "class 0 road A\nclass 1 sky B\nclass 2 obstacle A\n\
             dataset city standard\ndataset lf aux\n\
             remap city 0 0\nremap city 1 1\nremap city 2 2\n\
             remap lf 0 ignore\nremap lf 1 0\nremap lf 2 2\n",
        )
        .unwrap()
    }

    #[test]
    fn lambda_follows_the_standard_flag() {
        let t = tax();
        assert_eq!(lambda_select("city", &t).unwrap(), 1);
        assert_eq!(lambda_select("lf", &t).unwrap(), 0);
        assert!(lambda_select("elsewhere", &t).is_err());
        let solo = LabelTaxonomy::parse("class 0 a A\nclass 1 b B\ndataset only standard\nremap only 0 0\n").unwrap();
        assert_eq!(lambda_select("only", &solo).unwrap(), 1);
    }

    #[test]
    fn remap_sends_background_to_ignore_and_free_space_to_road() {
        let t = tax();
        let raw = LabelMap::new(1, 3, vec![0, 1, 2]).unwrap();
        assert_eq!(remap_labels(&raw, "lf", &t).unwrap().data, vec![IGNORE_ID, 0, 2]);
        assert_eq!(remap_labels(&raw, "city", &t).unwrap().data, vec![0, 1, 2]);
        let bad = LabelMap::new(1, 1, vec![9]).unwrap();
        assert!(remap_labels(&bad, "lf", &t).is_err());
    }

    #[test]
    fn weights_per_set() {
        let t = tax();
        let m = LabelMap::new(1, 4, vec![0, 1, 2, IGNORE_ID]).unwrap();
        assert_eq!(pixel_weights(&m, "city", &t).unwrap(), vec![1.0, 1.0, 1.0, 0.0]);
        assert_eq!(pixel_weights(&m, "lf", &t).unwrap(), vec![1.0, 0.0, 1.0, 0.0]);
        let out = LabelMap::new(1, 1, vec![3]).unwrap();
        assert!(pixel_weights(&out, "city", &t).is_err());
    }
}
