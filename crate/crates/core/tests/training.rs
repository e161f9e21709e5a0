use dra_core::losses::LossKind;
use dra_core::protocols::{sample_general, synth_generate, ImageStore, LabeledId, Setting, SplitResult, SynthSpec};
use dra_core::pseudogen::{PseudoKind, PseudoSource};
use dra_core::trainer::{fit, TrainConfig, Trainer};
use dra_core::{rng_stream, AblationMask, DraRng, Array3, BackboneConfig, ImageTensor};
use rand::Rng;

fn majority(results: &[bool]) -> bool {
    results.iter().filter(|r| **r).count() * 2 > results.len()
}

#[test]
fn training_lowers_the_loss() {
    let data = synth_generate(&SynthSpec {
        train_normals: 40,
        test_normals: 10,
        per_class: 12,
        ..SynthSpec::default()
    })
    .unwrap();
    let pseudo = PseudoSource::new(PseudoKind::Cutmix).unwrap();
    let mut outcomes = Vec::new();
    for seed in 0..3 {
        let split = sample_general(&data.catalog, 10, seed).unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            iterations_per_epoch: 5,
            batch_size: 16,
            backbone: BackboneConfig::tiny_with_width(8),
            seed,
            ..TrainConfig::default()
        };
        let out = fit(&split, &data.images, &pseudo, &cfg).unwrap();
        let first = out.log.epochs.first().unwrap().mean_loss;
        let last = out.log.epochs.last().unwrap().mean_loss;
        outcomes.push(last < first);
    }
    assert!(majority(&outcomes), "{outcomes:?}");
}

fn separable_toy(seed: u64) -> (SplitResult, ImageStore) {
    let mut rng = rng_stream(seed, 99);
    let mut store = ImageStore::new();
    let size = 16;
    let plain = |rng: &mut DraRng| {
        let v: Vec<f64> = (0..3 * size * size).map(|_| rng.random_range(0.0..0.02)).collect();
        Array3::from_vec(3, size, size, v).unwrap()
    };
    let mut normals = Vec::new();
    for i in 0..20 {
        let id = format!("n{i}");
        store.insert(id.clone(), ImageTensor::new(plain(&mut rng)).unwrap());
        normals.push(id);
    }
    let mut anomalies = Vec::new();
    for i in 0..10 {
        let mut a = plain(&mut rng);
        let (top, left) = (rng.random_range(0..size - 6), rng.random_range(0..size - 6));
        for c in 0..3 {
            for y in top..top + 6 {
                for x in left..left + 6 {
                    a.set(c, y, x, 1.0);
                }
            }
        }
        let id = format!("a{i}");
        store.insert(id.clone(), ImageTensor::new(a).unwrap());
        anomalies.push(LabeledId {
            id,
            class: "square".into(),
        });
    }
    let split = SplitResult {
        setting: Setting::General,
        shots: 10,
        seed,
        seen_class: None,
        train_normals: normals,
        train_anomalies: anomalies,
        test_normals: Vec::new(),
        test_anomalies: Vec::new(),
        degenerate: true,
    };
    (split, store)
}

#[test]
fn seen_head_separates_a_toy_problem() {
    let pseudo = PseudoSource::new(PseudoKind::Cutmix).unwrap();
    let mut outcomes = Vec::new();
    for seed in 0..3 {
        let (split, store) = separable_toy(seed);
        let cfg = TrainConfig {
            batch_size: 16,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            freeze_backbone: true,
            ablation_mask: AblationMask::DRA1A,
            loss: LossKind::Deviation { margin: 5.0 },
            scales: vec![1.0],
            backbone: BackboneConfig::tiny_with_width(16),
            seed,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(&split, &store, &pseudo, &cfg, None).unwrap();
        let mut window = Vec::new();
        let mut reached = None;
        for step in 0..200 {
            let l = trainer.step().unwrap().seen.unwrap();
            window.push(l);
            if window.len() > 10 {
                window.remove(0);
            }
            if window.len() == 10 && window.iter().sum::<f64>() / 10.0 < 0.1 {
                reached = Some(step);
                break;
            }
        }
        outcomes.push(reached.is_some());
    }
    assert!(majority(&outcomes), "{outcomes:?}");
}
