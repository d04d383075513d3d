//! Parses a layer spec, prints per-layer shapes, and runs a forward pass in
//! both modes on patch- and image-sized inputs.

use spatial_contrast::model::{infer, init_params, Mode, ModelSpec};
use spatial_contrast::tensor::Tensor;

const SPEC: &str = "\
input 3 16 16
conv 8 3 1 1
relu
maxpool 2
conv 16 3 1 1
relu
gap
affine 5
tap 4 0.5
tap 6
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ModelSpec::parse(SPEC)?;
    for (layer, shape) in spec.layers.iter().zip(spec.validate_nominal()?) {
        println!("{layer:<16} -> {shape:?}");
    }
    let state = init_params::<f32>(&spec, 0)?;
    for side in [16, 32] {
        let x = Tensor::<f32>::full(vec![2, 3, side, side], 0.5)?;
        let feats = infer(&spec, &state, &x, Mode::Features)?;
        let logits = infer(&spec, &state, &x, Mode::Logits)?;
        let shapes: Vec<_> = feats.outputs.iter().map(|t| t.shape().to_vec()).collect();
        println!(
            "{side}x{side}: tap features {shapes:?}, logits {:?}",
            logits.output().shape()
        );
    }
    Ok(())
}
