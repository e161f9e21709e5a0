//! Quick oracle and invariant checks, run by `dra selftest`.

use dra_core::eval::auc_scores;
use dra_core::heads::{mean_feature_map, residual_map, residual_score, topk_mil_pool, PatchClassifier};
use dra_core::losses::{deviation_loss, deviation_loss_grad, PriorScoreSet};
use dra_core::protocols::{build_split, DatasetCatalog, ProtocolSpec, Setting};
use dra_core::pseudogen::{cutmix, CutMixParams};
use dra_core::{rng_stream, Array3, FeatureMap, ImageTensor, ParamStore, ScoreMap};
use rand::Rng;

use crate::container::Container;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, result: Result<String, String>) -> Check {
    match result {
        Ok(detail) => Check {
            name,
            passed: true,
            detail,
        },
        Err(detail) => Check {
            name,
            passed: false,
            detail,
        },
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn topk() -> Result<String, String> {
    let mut rng = rng_stream(11, 0);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let v: Vec<f64> = (0..h * w).map(|_| rng.random_range(-3.0..3.0)).collect();
        let k = [0.05, 0.1, 0.5, 1.0][rng.random_range(0..4)];
        let got = topk_mil_pool(&ScoreMap::new(h, w, v.clone()).map_err(|e| e.to_string())?, k).map_err(|e| e.to_string())?;
        let mut s = v;
        s.sort_by(|a, b| b.total_cmp(a));
        let n = ((k * s.len() as f64).floor() as usize).max(1);
        let want = s[..n].iter().sum::<f64>() / n as f64;
        worst = worst.max((got - want).abs());
    }
    ensure(worst <= 1e-12, || format!("max error {worst:e}"))?;
    Ok(format!("200 maps, max error {worst:e}"))
}

fn deviation_grad() -> Result<String, String> {
    let mut rng = rng_stream(12, 0);
    let prior = PriorScoreSet::draw(&mut rng, 5000, 0.0, 1.0).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut n = 0;
    while n < 50 {
        let s = rng.random_range(-8.0..8.0);
        let y = rng.random::<bool>();
        let dev = (s - prior.mean()) / prior.std();
        if dev.abs() < 0.05 || (y && (dev - 5.0).abs() < 0.05) {
            continue;
        }
        let f = |x| deviation_loss(x, y, &prior, 5.0).unwrap();
        let h = 1e-6;
        let fd = (f(s + h) - f(s - h)) / (2.0 * h);
        let an = deviation_loss_grad(s, y, &prior, 5.0).map_err(|e| e.to_string())?;
        let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
        n += 1;
    }
    ensure(worst <= 1e-4, || format!("max relative error {worst:e}"))?;
    Ok(format!("50 points, max relative error {worst:e}"))
}

fn cutmix_identity() -> Result<String, String> {
    let mut rng = rng_stream(13, 0);
    for _ in 0..50 {
        let data: Vec<f64> = (0..3 * 32 * 32).map(|_| rng.random::<f64>()).collect();
        let x = ImageTensor::new(Array3::from_vec(3, 32, 32, data).unwrap()).unwrap();
        let out = cutmix(&x, &mut rng, &CutMixParams::identity()).map_err(|e| e.to_string())?;
        ensure(out.image == x, || "identity cutmix changed the image".into())?;
    }
    Ok("50 draws bitwise identical".into())
}

fn auc_oracle() -> Result<String, String> {
    let mut rng = rng_stream(14, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=60);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
        let got = auc_scores(&scores, &labels).map_err(|e| e.to_string())?;
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        worst = worst.max((got - wins / pairs).abs());
    }
    ensure(worst <= 1e-9, || format!("max error {worst:e}"))?;
    Ok(format!("100 lists, max error {worst:e}"))
}

fn protocols() -> Result<String, String> {
    let mut rng = rng_stream(15, 0);
    for trial in 0..20u64 {
        let mut c = DatasetCatalog {
            name: "t".into(),
            normal_train: (0..rng.random_range(8..30)).map(|i| format!("n{i}")).collect(),
            ..DatasetCatalog::default()
        };
        let classes = rng.random_range(2..5);
        for k in 0..classes {
            c.anomalies.insert(format!("c{k}"), (0..rng.random_range(10..20)).map(|i| format!("a{k}_{i}")).collect());
        }
        for setting in [Setting::General, Setting::Hard] {
            let spec = |shots| ProtocolSpec {
                setting,
                shots,
                ..ProtocolSpec::default()
            };
            let ten = build_split(&c, &spec(10), trial).map_err(|e| e.to_string())?;
            let one = build_split(&c, &spec(1), trial).map_err(|e| e.to_string())?;
            let train: Vec<&str> = ten.train_anomalies.iter().map(|a| a.id.as_str()).collect();
            ensure(ten.test_anomalies.iter().all(|a| !train.contains(&a.id.as_str())), || "train/test anomaly overlap".into())?;
            if setting == Setting::Hard {
                let seen = ten.seen_class.clone().unwrap_or_default();
                ensure(ten.test_anomalies.iter().all(|a| a.class != seen), || "seen class in hard test set".into())?;
            }
            ensure(one.test_anomalies == ten.test_anomalies && one.test_normals == ten.test_normals, || {
                "one-shot test set differs from ten-shot".into()
            })?;
            ensure(one.train_anomalies.len() == 1 && train.contains(&one.train_anomalies[0].id.as_str()), || {
                "one-shot anomaly is not nested".into()
            })?;
        }
    }
    Ok("20 catalogs, both settings, nesting exact".into())
}

fn residual() -> Result<String, String> {
    let mut rng = rng_stream(16, 0);
    let mut map = || {
        let v: Vec<f64> = (0..4 * 3 * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        FeatureMap::new(Array3::from_vec(4, 3, 3, v).unwrap()).unwrap()
    };
    let maps: Vec<FeatureMap> = (0..5).map(|_| map()).collect();
    let (a, b) = (&maps[0], &maps[1]);
    let ab = residual_map(a, b).map_err(|e| e.to_string())?;
    let ba = residual_map(b, a).map_err(|e| e.to_string())?;
    ensure(ab.values().data().iter().zip(ba.values().data()).all(|(x, y)| *x == -*y), || "residual is not anti-symmetric".into())?;
    let mean = mean_feature_map(&maps).map_err(|e| e.to_string())?;
    for (i, v) in mean.values().data().iter().enumerate() {
        let want = maps.iter().map(|m| m.values().data()[i]).sum::<f64>() / maps.len() as f64;
        ensure((v - want).abs() <= 1e-12, || format!("mean map off by {:e}", (v - want).abs()))?;
    }
    let clf = PatchClassifier::from_weights(vec![0.3, -1.0, 2.0, 0.5], 0.0);
    let s = residual_score(&mean, Some(&mean), &clf, 0.1).map_err(|e| e.to_string())?;
    ensure(s == 0.0, || format!("self-residual score {s}"))?;
    Ok("anti-symmetry exact, mean within 1e-12, self score 0".into())
}

fn container() -> Result<String, String> {
    let mut store = ParamStore::new();
    store.push("w", vec![2, 3], vec![0.1, -2.5, 1e-300, f64::MAX, -0.0, 3.0]);
    let c = Container::new("weights", store);
    let back = Container::from_bytes(&c.to_bytes()).map_err(|e| e.to_string())?;
    ensure(back == c, || "round trip differs".into())?;
    let mut bytes = c.to_bytes();
    let n = bytes.len();
    bytes[n - 33] ^= 0x10;
    ensure(Container::from_bytes(&bytes).is_err(), || "corruption was not detected".into())?;
    Ok("round trip exact, corruption detected".into())
}

/// Runs every check; never panics on a failing check.
pub fn run_selftest() -> Vec<Check> {
    let suites: [(&'static str, fn() -> Result<String, String>); 7] = [
        ("topk-oracle", topk),
        ("deviation-gradient", deviation_grad),
        ("cutmix-identity", cutmix_identity),
        ("auc-oracle", auc_oracle),
        ("protocols", protocols),
        ("residual", residual),
        ("container", container),
    ];
    suites.into_iter().map(|(name, f)| check(name, f())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_selftest() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
