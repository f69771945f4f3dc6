//! Builds each selection mask on a tiny pair of hidden states and shows the
//! resulting mixes.
//!
//! ```bash
//! cargo run -p msmix --example mask_strategies
//! ```

use msmix::augment::{
    apply_mask, linear_mix, mix_labels, product_magnitude_mask, random_mask, two_stage_mask,
    MixPlan, MixStrategy, RowScope,
};
use msmix::model::HiddenState;
use msmix::tensor::{Matrix, Rng};

fn show(name: &str, state: &HiddenState) {
    print!("{name:<10}");
    for r in 0..state.values.rows() {
        if r > 0 {
            print!("{:<10}", "");
        }
        let row: Vec<String> =
            state.values.row(r).iter().map(|v| format!("{v:>5.2}")).collect();
        println!("[{}]", row.join(", "));
    }
}

fn main() {
    let mut rng = Rng::new(42);
    let h_i = HiddenState::new(
        Matrix::from_rows(&[vec![0.1, -2.0, 0.4, 3.0, -0.2, 1.5]]).unwrap(),
        1,
    )
    .unwrap();
    let h_j = HiddenState::new(
        Matrix::from_rows(&[vec![2.0, 0.3, -4.0, 0.1, 5.0, -1.0]]).unwrap(),
        1,
    )
    .unwrap();
    show("h_i", &h_i);
    show("h_j", &h_j);
    println!();

    let p = 2; // swap two of the six dimensions
    let q = 4; // candidate pool for the two-stage strategy

    let base = random_mask(1, 6, p, &mut rng).unwrap();
    println!("base    swaps columns {:?} (uniform random)", base.zero_columns(0));

    let product = product_magnitude_mask(&h_i, &h_j, p, RowScope::PerRow).unwrap();
    println!("a       swaps columns {:?} (largest |h_i ⊙ h_j|)", product.zero_columns(0));

    let two_stage = two_stage_mask(&h_i, &h_j, p, q, false, RowScope::PerRow).unwrap();
    println!(
        "b       swaps columns {:?} (largest |h_j| within the {} smallest |h_i|)",
        two_stage.zero_columns(0),
        q
    );
    println!();

    show("base mix", &apply_mask(&h_i, &h_j, &base).unwrap());
    show("a mix", &apply_mask(&h_i, &h_j, &product).unwrap());
    show("b mix", &apply_mask(&h_i, &h_j, &two_stage).unwrap());
    show("linear .7", &linear_mix(&h_i, &h_j, 0.7).unwrap());
    println!();

    // Label fusion in consistent mode: the weight is the retained fraction.
    let plan = MixPlan {
        strategy: MixStrategy::Base,
        i: 0,
        j: 1,
        layer: 2,
        lambda: 0.33,
        swap_count: p,
        pool_count: q,
        mask: Some(base),
        label_weight: (6 - p) as f64 / 6.0,
    };
    let fused = mix_labels(&[1.0, 0.0], &[0.0, 1.0], &plan).unwrap();
    println!("labels: {p}/6 dimensions swapped -> y' = [{:.3}, {:.3}]", fused[0], fused[1]);
}
