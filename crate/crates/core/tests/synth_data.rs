mod common;

use std::collections::BTreeSet;

use common::small_params;
use lwkd_core::synth::{generate_corpus, is_heldout, BatchIter, SynthParams};
use proptest::prelude::*;

#[test]
fn labels_cover_the_full_grid() {
    let p = small_params(9);
    let c = generate_corpus(&p).unwrap();
    assert_eq!(c.len(), p.num_utterances());
    let cells: BTreeSet<(usize, usize, usize)> = c.records.iter().map(|r| (r.speaker, r.content, r.intent)).collect();
    assert_eq!(cells.len(), p.n_speakers * p.n_contents * p.n_intents);
    for (i, r) in c.records.iter().enumerate() {
        assert_eq!(r.id, i);
        assert_eq!(c.audio(i).len(), r.length);
        assert_eq!(r.length, p.samples_per_utterance());
    }
}

#[test]
fn seeds_change_audio_but_not_labels() {
    let a = generate_corpus(&small_params(1)).unwrap();
    let b = generate_corpus(&small_params(2)).unwrap();
    assert_eq!(a.records, b.records);
    assert_ne!(a.samples, b.samples);
}

#[test]
fn split_depends_only_on_ids() {
    let a = generate_corpus(&small_params(1)).unwrap();
    let (train, held) = a.split();
    assert!(held.iter().all(|&i| is_heldout(i)));
    assert!(train.iter().all(|&i| !is_heldout(i)));
    assert_eq!(train.len() + held.len(), a.len());
}

#[test]
fn invalid_parameters_are_rejected() {
    let bad = [
        SynthParams { n_speakers: 0, ..SynthParams::default() },
        SynthParams { duration_s: 0.01, ..SynthParams::default() },
        SynthParams { base_f0_hz: 7000.0, ..SynthParams::default() },
    ];
    for p in bad {
        assert!(generate_corpus(&p).is_err(), "{p:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn every_epoch_is_a_permutation(n in 1usize..60, batch in 1usize..8, seed in any::<u64>()) {
        prop_assume!(batch <= n);
        let items: Vec<usize> = (100..100 + n).collect();
        let per_epoch = n / batch;
        let mut it = BatchIter::new(items.clone(), batch, seed, true).unwrap();
        for _ in 0..2 {
            let mut seen = BTreeSet::new();
            for _ in 0..per_epoch {
                let b = it.next().unwrap();
                prop_assert_eq!(b.len(), batch);
                for i in b {
                    prop_assert!(items.contains(&i));
                    prop_assert!(seen.insert(i));
                }
            }
        }
    }

    #[test]
    fn samples_stay_in_range(seed in any::<u64>()) {
        let p = SynthParams { n_speakers: 2, n_contents: 2, n_intents: 2, utterances_per_cell: 1, duration_s: 0.05, ..SynthParams { seed, ..SynthParams::default() } };
        let c = generate_corpus(&p).unwrap();
        prop_assert!(c.samples.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }
}
