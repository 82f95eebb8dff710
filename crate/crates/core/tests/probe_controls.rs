use bcomm_core::probes::{run_probe, ProbeConfig, ProbeKind, ProbeRecord};
use bcomm_grad::rng::stream;
use rand::Rng;

const CLASSES: usize = 4;

fn one_hot(k: usize) -> Vec<f64> {
    let mut v = vec![0.0; CLASSES];
    v[k] = 1.0;
    v
}

fn records(n: usize, mut make: impl FnMut(usize) -> (usize, Vec<f64>)) -> Vec<ProbeRecord> {
    (0..n)
        .map(|i| {
            let (action, message) = make(i);
            ProbeRecord {
                episode: i / 40,
                step: i % 40,
                agent: 0,
                observation: vec![0.0],
                masked_aggregate: message.clone(),
                message,
                action,
            }
        })
        .collect()
}

#[test]
fn bijective_messages_are_decoded() {
    let mut rng = stream(1, 0);
    let recs = records(2000, |_| {
        let a = rng.random_range(0..CLASSES);
        (a, one_hot((a + 1) % CLASSES))
    });
    for kind in [ProbeKind::Signaling, ProbeKind::Listening] {
        let r = run_probe(&recs, kind, CLASSES, &ProbeConfig::default()).unwrap();
        assert!(r.accuracy > 0.99, "{kind:?} {}", r.accuracy);
    }
}

#[test]
fn constant_messages_do_no_better_than_the_majority_class() {
    let mut rng = stream(2, 0);
    let shares = [0.5, 0.25, 0.15, 0.10];
    let recs = records(2000, |_| {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let a = shares.iter().position(|s| {
            acc += s;
            u < acc
        });
        (a.unwrap_or(CLASSES - 1), vec![1.0, 0.0, 0.0, 0.0])
    });
    let cfg = ProbeConfig::default();
    let majority = run_probe(&recs, ProbeKind::Majority, CLASSES, &cfg).unwrap();
    let signaling = run_probe(&recs, ProbeKind::Signaling, CLASSES, &cfg).unwrap();
    assert_eq!(signaling.correct, majority.correct);
}

#[test]
fn shuffled_labels_sit_at_chance() {
    let mut rng = stream(3, 0);
    let recs = records(4000, |_| (rng.random_range(0..CLASSES), one_hot(rng.random_range(0..CLASSES))));
    let cfg = ProbeConfig { epochs: 50, ..ProbeConfig::default() };
    let r = run_probe(&recs, ProbeKind::Signaling, CLASSES, &cfg).unwrap();
    let chance = 1.0 / CLASSES as f64;
    let sigma = (chance * (1.0 - chance) / r.correct.len() as f64).sqrt();
    assert!((r.accuracy - chance).abs() < 3.0 * sigma, "{} vs {chance} ± {sigma}", r.accuracy);
}
