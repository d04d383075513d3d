//! Generates the clustered texture dataset and writes it as PPM files.
//!
//! ```text
//! cargo run --example synthetic_data -- out_dir
//! ```

use spatial_contrast::data::{synth_clustered, texture_family, write_ppm_dir};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "synthetic_ppm".into());
    for k in 0..10 {
        let f = texture_family(k, 10);
        println!(
            "class {k}: orientation {:.3} rad, {:.3} cycles/px",
            f.orientation, f.frequency
        );
    }
    let ds = synth_clustered(10, 5, 64, 0)?;
    write_ppm_dir(out.as_ref(), &ds)?;
    println!("wrote {} images to {out}", ds.len());
    Ok(())
}
