//! Generate the 16-class shape dataset, save it, reload it, and write a
//! contact sheet (one row per class) as a PPM image.
//!
//! ```bash
//! cargo run -p advlens --example generate_dataset -- /tmp/shapes
//! ```

use std::path::PathBuf;

use advlens::synthdata::{generate, Dataset, DatasetConfig, DatasetManifest};

fn main() -> advlens::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/shapes".into()));
    let config = DatasetConfig {
        train_per_class: 8,
        val_per_class: 4,
        ..DatasetConfig::default()
    };
    let data = generate(&config)?;
    data.save(&out)?;

    let manifest = DatasetManifest::load(&out)?;
    println!("saved {} records, hash {}", manifest.num_records, manifest.content_hash);
    let back = Dataset::load(&out)?;
    assert_eq!(back.content_hash(), data.content_hash());

    for class in 0..data.num_classes() {
        println!("{class:2}: {}", data.taxonomy.class_name(class)?);
    }

    // contact sheet: 16 rows x 8 training samples
    let s = config.image_size;
    let cols = config.train_per_class;
    let (w, h) = (cols * s, config.num_classes * s);
    let mut ppm = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let img = data.get(advlens::synthdata::Split::Train, y / s, x / s).expect("in range");
            let plane = s * s;
            for c in 0..3 {
                ppm.push(img.image.data()[c * plane + (y % s) * s + (x % s)].round() as u8);
            }
        }
    }
    let sheet = out.join("contact_sheet.ppm");
    std::fs::write(&sheet, ppm).expect("write contact sheet");
    println!("contact sheet: {}", sheet.display());
    Ok(())
}
