use std::path::Path;

use loco::backbone::{Backbone, BackboneConfig};
use loco::evaluate::{adjacent_pairs, load_suite};
use loco::layout::Layout;

fn suite() -> Vec<(String, Layout)> {
    load_suite(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../suite")).unwrap()
}

#[test]
fn bundled_suite_composition() {
    let suite = suite();
    assert_eq!(suite.len(), 24);
    assert!(suite.iter().all(|(_, l)| (2..=4).contains(&l.k())));
    for k in 2..=4 {
        assert!(suite.iter().filter(|(_, l)| l.k() == k).count() >= 6, "too few {k}-object layouts");
    }
    let adjacent = suite.iter().filter(|(_, l)| !adjacent_pairs(l, 16).is_empty()).count();
    assert!(adjacent >= 6, "{adjacent} layouts with adjacent boxes");
    assert!(suite.iter().filter(|(_, l)| !l.relations.is_empty()).count() >= 20);
    assert!(suite.iter().any(|(_, l)| l.objects.iter().any(|o| o.phrase.span.len() > 1)));
}

/// Unguided, noise-free runs keep most argmax labels fixed after the first
/// 40% of steps, pooled over every suite prompt and 20 seeds.
#[test]
fn early_labels_persist_across_suite_prompts() {
    let cfg = BackboneConfig { sigma_max: 0.0, ..BackboneConfig::default() };
    let cut = (0.4 * cfg.total_steps as f64).round() as usize;
    let (mut kept, mut total) = (0usize, 0usize);
    for (_, layout) in suite() {
        let bb = Backbone::new(&cfg, &layout.prompt).unwrap();
        for seed in 0..20 {
            let mut z = bb.initial_latent(seed);
            let mut early = Vec::new();
            for step in 0..cfg.total_steps {
                let a = bb.cross_attention(&z).unwrap();
                if step == cut {
                    early = a.argmax_tokens();
                }
                z = bb.denoise(&z, &a).unwrap();
            }
            let last = bb.cross_attention(&z).unwrap().argmax_tokens();
            kept += early.iter().zip(&last).filter(|(a, b)| a == b).count();
            total += last.len();
        }
    }
    let frac = kept as f64 / total as f64;
    assert!(frac >= 0.95, "{frac:.4}");
}
