//! A small separable four-class dataset: the relation is fixed by a
//! connective-like cue word planted in the second argument.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, DiscourseInstance, LabelSchema, Split};

/// Cue words per pdtb4 class, in schema order.
pub const CUES: [[&str; 3]; 4] = [
    ["however", "but", "although"],
    ["because", "so", "therefore"],
    ["also", "moreover", "instance"],
    ["then", "before", "after"],
];

const FILLERS: usize = 40;

fn fillers(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<String> {
    let n = rng.gen_range(lo..=hi);
    (0..n).map(|_| format!("w{}", rng.gen_range(0..FILLERS))).collect()
}

fn instance(rng: &mut ChaCha8Rng, class: usize, split: Split, schema: &LabelSchema) -> DiscourseInstance {
    let arg1 = fillers(rng, 3, 6).join(" ");
    let mut arg2 = fillers(rng, 2, 5);
    let cue = *CUES[class].choose(rng).unwrap();
    // mostly sentence-initial, like an implicit connective made explicit
    let at = if rng.gen_bool(0.75) { 0 } else { rng.gen_range(0..=arg2.len()) };
    arg2.insert(at, cue.to_string());
    DiscourseInstance::new(&arg1, &arg2.join(" "), vec![class], split, schema).expect("synthetic instance is valid")
}

/// Balanced splits of the given sizes, classes interleaved then shuffled.
pub fn generate(seed: u64, train: usize, validation: usize, test: usize) -> Dataset {
    let schema = LabelSchema::pdtb4();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::with_capacity(train + validation + test);
    for (split, n) in [(Split::Train, train), (Split::Validation, validation), (Split::Test, test)] {
        let mut part: Vec<DiscourseInstance> = (0..n).map(|i| instance(&mut rng, i % 4, split, &schema)).collect();
        part.shuffle(&mut rng);
        instances.extend(part);
    }
    Dataset::new(schema, instances)
}

/// The standard overfit set: 200 training pairs and 100 held-out pairs for
/// each of validation and test.
pub fn standard(seed: u64) -> Dataset {
    generate(seed, 200, 100, 100)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_cued() {
        let ds = generate(1, 40, 8, 8);
        assert_eq!(ds.label_counts(Some(Split::Train)), vec![10; 4]);
        for inst in &ds.instances {
            let cues = &CUES[inst.labels[0]];
            assert!(inst.arg2.split(' ').any(|w| cues.contains(&w)));
            assert!(!inst.arg1.split(' ').any(|w| CUES.iter().flatten().any(|c| *c == w)));
        }
    }

    #[test]
    fn seeded() {
        assert_eq!(generate(3, 8, 4, 4), generate(3, 8, 4, 4));
        assert_ne!(generate(3, 8, 4, 4), generate(4, 8, 4, 4));
    }

    #[test]
    fn roundtrips_through_tsv() {
        let ds = standard(0);
        let back = Dataset::parse(&ds.to_tsv(), &LabelSchema::pdtb4(), "synthetic").unwrap();
        assert_eq!(back.to_tsv(), ds.to_tsv());
    }
}
