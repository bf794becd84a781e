use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{substream_seed, DatasetManifest, Sample};
use crate::error::{Error, Result};

/// Per class: order by path, shuffle with a class-specific stream derived
/// from `seed`, send `floor(test_fraction · n)` samples to test.
pub fn split_per_class(
    samples: &[Sample],
    classes: &[String],
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    if let Some(s) = samples.iter().find(|s| !classes.contains(&s.label)) {
        return Err(Error::Data(format!(
            "sample {:?} has label {:?} outside the class list",
            s.path, s.label
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (ci, class) in classes.iter().enumerate() {
        let mut members: Vec<&Sample> = samples.iter().filter(|s| &s.label == class).collect();
        if members.is_empty() {
            return Err(Error::Data(format!("class {class:?} has no samples")));
        }
        members.sort_by(|a, b| a.path.cmp(&b.path));
        let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, &[ci as u64]));
        members.shuffle(&mut rng);
        let n_test = (test_fraction * members.len() as f64).floor() as usize;
        test.extend(members[..n_test].iter().map(|s| (*s).clone()));
        train.extend(members[n_test..].iter().map(|s| (*s).clone()));
    }
    DatasetManifest::new(classes.to_vec(), train, test, seed)
}
