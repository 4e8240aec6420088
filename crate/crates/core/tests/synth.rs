use segwithu::metrics::{argmax_labels, error_flags};
use segwithu::synth::{boundary_mask, error_profile, generate_case, generate_split, Split, SynthConfig};

#[test]
fn default_backbone_errs_mostly_at_boundaries() {
    let cases = generate_split(&SynthConfig::default(), 100, Split::Test).unwrap();
    let p = error_profile(&cases).unwrap();
    assert!((0.02..=0.25).contains(&p.error_rate), "error rate {}", p.error_rate);
    assert!(p.boundary_enrichment >= 3.0, "enrichment {}", p.boundary_enrichment);
}

#[test]
fn splits_are_disjoint_and_reproducible() {
    let cfg = SynthConfig {
        spatial: vec![8, 8],
        ..SynthConfig::default()
    };
    let a = generate_split(&cfg, 3, Split::Train).unwrap();
    let b = generate_split(&cfg, 3, Split::Val).unwrap();
    assert_eq!(a, generate_split(&cfg, 3, Split::Train).unwrap());
    for x in &a {
        assert!(b.iter().all(|y| y.id != x.id && y.labels != x.labels));
    }
    let other = SynthConfig { seed: 1, ..cfg };
    assert_ne!(a[0].labels, generate_split(&other, 1, Split::Train).unwrap()[0].labels);
}

#[test]
fn taps_follow_their_strides() {
    let cfg = SynthConfig {
        spatial: vec![16, 12],
        tap_channels: vec![5, 4, 3],
        tap_strides: vec![1, 2, 4],
        ..SynthConfig::default()
    };
    let c = generate_case(&cfg, 0).unwrap();
    assert_eq!(c.logits.shape(), &[1, 3, 16, 12]);
    assert_eq!(c.taps[0].shape(), &[1, 5, 16, 12]);
    assert_eq!(c.taps[1].shape(), &[1, 4, 8, 6]);
    assert_eq!(c.taps[2].shape(), &[1, 3, 4, 3]);
}

#[test]
fn errors_grow_with_noise() {
    let rate = |noise: f64| {
        let cfg = SynthConfig {
            spatial: vec![16, 16],
            noise_level: noise,
            ..SynthConfig::default()
        };
        error_profile(&generate_split(&cfg, 20, Split::Test).unwrap()).unwrap().error_rate
    };
    let (lo, mid, hi) = (rate(0.0), rate(1.0), rate(3.0));
    assert_eq!(lo, 0.0);
    assert!(lo < mid && mid < hi, "{lo} {mid} {hi}");
}

#[test]
fn boundary_mask_marks_label_changes() {
    let cfg = SynthConfig {
        spatial: vec![16, 16],
        ..SynthConfig::default()
    };
    let c = generate_case(&cfg, 2).unwrap();
    let near = boundary_mask(&c.labels, 1);
    let labels = c.labels.data();
    for y in 0..16 {
        for x in 0..15 {
            let (i, j) = (y * 16 + x, y * 16 + x + 1);
            if labels[i] != labels[j] {
                assert!(near[i] && near[j]);
            }
        }
    }
    let pred = argmax_labels(&c.logits).unwrap();
    assert_eq!(error_flags(&pred, &c.labels).unwrap().len(), near.len());
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        SynthConfig {
            num_classes: 1,
            ..SynthConfig::default()
        },
        SynthConfig {
            spatial: vec![3, 8],
            ..SynthConfig::default()
        },
        SynthConfig {
            tap_strides: vec![1],
            ..SynthConfig::default()
        },
    ];
    for cfg in bad {
        assert!(generate_case(&cfg, 0).is_err());
    }
}
