//! The batch contrastive loss on hand-made features: identical features,
//! a well separated batch, and the gradient that pulls positives in.

use spatial_contrast::sc_loss::{sc_batch_loss, sc_pair_loss, FeatureBatch};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let same = vec![vec![1.0, 2.0]; 4];
    let out = sc_batch_loss(&FeatureBatch::from_rows(&same, &same)?)?;
    println!(
        "4 identical images: loss {:.6} (ln 4 = {:.6})",
        out.loss,
        4f64.ln()
    );

    let anchors = vec![vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 5.0]];
    let positives = vec![vec![0.3, 0.1], vec![5.2, -0.4], vec![0.1, 4.6]];
    let out = sc_batch_loss(&FeatureBatch::from_rows(&anchors, &positives)?)?;
    println!("separated batch: loss {:.6}", out.loss);
    for i in 0..3 {
        println!(
            "  d[{i}] = {:?}",
            out.distance_matrix
                .row(i)
                .iter()
                .map(|d| format!("{d:.3}"))
                .collect::<Vec<_>>()
        );
        println!("  dL/df1[{i}] = {:?}", out.grad_f1.row(i));
    }

    let pair = sc_pair_loss(&[0.0], &[0.0], &[1.0])?;
    println!("pair loss with d+ = 0, d- = 1: {pair:.9}");
    Ok(())
}
