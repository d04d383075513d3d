//! Saves a model to the checkpoint format, reloads it, and checks that the
//! parameters and spec come back unchanged.

use std::collections::BTreeMap;

use spatial_contrast::checkpoint;
use spatial_contrast::model::{init_params, ModelSpec, ModelState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ModelSpec::reference(3, 32, 10);
    let state = init_params::<f32>(&spec, 42)?;
    let meta = BTreeMap::from([("phase".to_string(), "pretrain".to_string())]);
    let bytes = checkpoint::encode(&spec, &state, &meta);
    println!(
        "{} parameters, {} scalars, {} bytes",
        state.params.len(),
        state.num_scalars(),
        bytes.len()
    );

    let ck = checkpoint::decode(&bytes)?;
    let back: ModelState<f32> = ck.state.to_precision();
    println!("spec identical: {}", ck.spec == spec);
    println!("state identical: {}", back == state);
    println!("meta: {:?}", ck.meta);
    print!("{}", ck.spec.to_text());
    Ok(())
}
