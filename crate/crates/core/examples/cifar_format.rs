//! Writes a dataset in the CIFAR-10 binary record layout, reads it back and
//! draws a class-balanced labeled subset from it.
//!
//! With a directory argument holding `data_batch_1.bin` .. `data_batch_5.bin`
//! the real training set is loaded instead.

use spatial_contrast::data::{self, PerClass};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile_dir()?;
    let ds = match std::env::args().nth(1) {
        Some(dir) => data::load_cifar10_batches(&data::cifar10_train_files(dir.as_ref()))?,
        None => {
            let path = tmp.join("data_batch_1.bin");
            data::write_cifar10_binary(&path, &data::synth_clustered(10, 50, 32, 0)?)?;
            println!(
                "wrote {} bytes to {}",
                std::fs::metadata(&path)?.len(),
                path.display()
            );
            data::load_cifar10_binary(&path)?
        }
    };
    println!(
        "{}: {} images, classes {:?}",
        ds.name,
        ds.len(),
        ds.class_histogram()
    );
    let sub = data::subsample_labeled(&ds, PerClass::Count(20), 7)?;
    println!(
        "labeled subset: {} images, classes {:?}",
        sub.len(),
        sub.class_histogram()
    );
    println!("channel means {:?}", ds.channel_means());
    std::fs::remove_dir_all(&tmp)?;
    Ok(())
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join(format!("scnet-cifar-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
