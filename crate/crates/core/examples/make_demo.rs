//! Regenerates `assets/demo`: ten synthetic images and their manifest.
//!
//! `cargo run --example make_demo`

use std::collections::BTreeMap;
use std::path::Path;

use promptsmith::eval::{Manifest, ManifestEntry, Provenance};
use promptsmith::gateway::mock::synthetic_image;

const SAMPLES: [(&str, &str, &str, &str); 10] = [
    ("cat", "dog", "sofa", "sitting on the"),
    ("clam", "shrimp", "dish", "on the"),
    ("bear", "robot", "grass", "standing on the"),
    ("hair", "hat", "woman", "on the"),
    ("horse", "bicycle", "street", "standing in the"),
    ("cake", "flower", "plate", "on the"),
    ("bird", "boat", "tree", "sitting in the"),
    ("man", "girl", "bench", "sitting on the"),
    ("cup", "bowl", "table", "on the"),
    ("car", "horse", "beach", "near the"),
];

fn main() -> promptsmith::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/demo");
    std::fs::create_dir_all(&dir)?;
    let mut samples = Vec::new();
    for (i, (src, tgt, place, rel)) in SAMPLES.iter().enumerate() {
        let id = format!("demo-{i:02}");
        let file = format!("{id}.png");
        synthetic_image(1000 + i as u64, 64, 64).save_png(dir.join(&file))?;
        samples.push(ManifestEntry {
            id,
            image: file.into(),
            source: src.to_string(),
            target: tgt.to_string(),
            one_noun: format!("a {src}"),
            full_nouns: format!("{src} {place}"),
            full_description: format!("a {src} {rel} {place}"),
            provenance: Provenance::Synthetic,
            external: BTreeMap::new(),
        });
    }
    let text = serde_json::to_string_pretty(&Manifest { samples })? + "\n";
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}
