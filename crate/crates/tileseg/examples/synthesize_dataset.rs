//! Generate a small synthetic slide dataset and report what came out.
//!
//! ```text
//! cargo run --example synthesize_dataset
//! ```

use tileseg::synth::{generate_dataset, PixelClass, SlideGenConfig, Split};

fn main() {
    let cfg = SlideGenConfig {
        width: 512,
        height: 512,
        patch_size: 64,
        ..SlideGenConfig::default()
    };
    let out = std::path::Path::new("target/example-out/dataset");
    let manifest = generate_dataset(0, 10, &cfg, out).expect("generation succeeds");

    println!("wrote {} slides under {}", manifest.slides.len(), out.display());
    for split in [Split::Train, Split::Val, Split::Test] {
        let ids: Vec<&str> = manifest
            .slides_in(split)
            .map(|s| s.id.as_str())
            .collect();
        println!("  {:5}: {}", split.as_str(), ids.join(" "));
    }

    // ground-truth composition of the first slide
    let (_, mask) = tileseg::synth::generate_slide(manifest.slides[0].seed, &cfg).unwrap();
    let total = mask.codes.len() as f64;
    let frac = |class: PixelClass| {
        mask.codes.iter().filter(|&&c| c == class.code()).count() as f64 / total
    };
    println!(
        "slide_000 pixels: background {:.1}%, normal {:.1}%, tumor {:.1}%, unannotated {:.1}%",
        100.0 * frac(PixelClass::Background),
        100.0 * frac(PixelClass::Normal),
        100.0 * frac(PixelClass::Tumor),
        100.0 * frac(PixelClass::Unannotated),
    );
    println!("slides are PPM (P6), masks PGM (P5) with codes 0/64/128/255");
}
