use std::collections::HashSet;
use std::fs;

use debugcn_core::bundle::{load_manifest, Label};
use debugcn_core::synth::{generate, generate_bundle, SynthSpec, MANIFEST_FILE};

fn extremes(values: &[f32]) -> (f32, f32) {
    values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

#[test]
fn same_seed_gives_byte_identical_directories() {
    let spec = SynthSpec::counts(1, 1, 7);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(&spec, a.path()).unwrap();
    generate(&spec, b.path()).unwrap();
    for name in ["clean-0000.dwb", "trojaned-0000.dwb", MANIFEST_FILE] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    let other = SynthSpec::counts(1, 1, 8);
    let (c, _) = generate_bundle(&other, 0).unwrap();
    let (d, _) = generate_bundle(&spec, 0).unwrap();
    assert_ne!(c.fc_weight, d.fc_weight);
}

#[test]
fn trojaned_tails_exceed_clean_tails() {
    let mut wins = 0;
    for seed in 0..100 {
        let spec = SynthSpec::counts(1, 1, seed);
        let (clean, _) = generate_bundle(&spec, 0).unwrap();
        let (trojaned, label) = generate_bundle(&spec, 1).unwrap();
        assert_eq!(label, Label::Trojaned);
        let (cmin, cmax) = extremes(clean.fc_weight.data());
        let (tmin, tmax) = extremes(trojaned.fc_weight.data());
        if tmin.abs() > cmin.abs() && tmax.abs() > cmax.abs() {
            wins += 1;
        }
    }
    assert!(wins >= 99, "{wins}/100");
}

#[test]
fn clean_weights_have_the_requested_spread() {
    let spec = SynthSpec::counts(50, 0, 3);
    for k in 0..spec.num_clean {
        let (b, _) = generate_bundle(&spec, k).unwrap();
        let w = b.fc_weight.data();
        assert_eq!(w.len(), 512 * 10);
        let mean = w.iter().map(|&v| f64::from(v)).sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let rel = (var.sqrt() - spec.clean_scale).abs() / spec.clean_scale;
        assert!(rel <= 0.05, "bundle {k}: std off by {rel}");
    }
}

#[test]
fn default_population_census() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::counts(100, 100, 0);
    let manifest = generate(&spec, dir.path()).unwrap();
    let loaded = load_manifest(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded.entries, manifest.entries);
    let ids: HashSet<&str> = manifest.entries.iter().map(|e| e.model_id.as_str()).collect();
    assert_eq!(ids.len(), 200);
    let trojaned = manifest.labels().iter().filter(|&&l| l == Label::Trojaned).count();
    assert_eq!(trojaned, 100);
    loaded.validate_files().unwrap();
    let b = loaded.read_entry(&loaded.entries[150]).unwrap();
    assert_eq!(b.fc_weight.dims(), &[10, 512]);
    assert_eq!(b.conv1_weight.unwrap().dims(), &[16, 1, 5, 5]);
    assert_eq!(b.arch_tag, "synthetic");
}
