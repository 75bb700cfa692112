use adt_core::field::{Grid2D, SimplexField};
use adt_harness::config::TrainConfig;
use adt_harness::losses::{seg_loss, total_loss};

fn halves(n: usize) -> SimplexField {
    let labels: Vec<usize> = (0..n * n).map(|i| usize::from(i >= n * n / 2)).collect();
    SimplexField::one_hot(Grid2D::square(n).unwrap(), 2, &labels).unwrap()
}

fn zero_weights() -> TrainConfig {
    TrainConfig {
        lambda_topo: 0.0,
        lambda_reg: 0.0,
        lambda_tv: 0.0,
        ..TrainConfig::default()
    }
}

#[test]
fn uniform_against_halves_is_one_third() {
    // per class: 2·(0.5·8) / (0.25·16 + 8) = 8/12
    let q = halves(4);
    let p = SimplexField::uniform(q.grid(), 2).unwrap();
    assert!((seg_loss(&p, &q).unwrap() - 1.0 / 3.0).abs() < 1e-6);
}

#[test]
fn perfect_and_disjoint_predictions() {
    let q = halves(4);
    assert!(seg_loss(&q, &q).unwrap() <= 1e-6);
    let flipped: Vec<usize> = (0..16).map(|i| usize::from(i < 8)).collect();
    let p = SimplexField::one_hot(q.grid(), 2, &flipped).unwrap();
    assert!((seg_loss(&p, &q).unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn shape_mismatch_is_an_error() {
    let q = halves(4);
    let p = SimplexField::uniform(Grid2D::square(5).unwrap(), 2).unwrap();
    assert!(seg_loss(&p, &q).is_err());
}

#[test]
fn zero_weights_reduce_to_segmentation() {
    let q = halves(4);
    let p = SimplexField::uniform(q.grid(), 2).unwrap();
    assert_eq!(total_loss(&p, &q, &zero_weights()).unwrap(), seg_loss(&p, &q).unwrap());
}

#[test]
fn perfect_prediction_has_zero_total() {
    let q = halves(6);
    let cfg = TrainConfig {
        lambda_topo: 1.0,
        lambda_tv: 0.0,
        ..TrainConfig::default()
    };
    assert!(total_loss(&q, &q, &cfg).unwrap().abs() < 1e-6);
}

#[test]
fn uniform_total_adds_overlap() {
    // 1/3 from the Dice term plus 0.25 overlap; no centreline classes
    let q = halves(4);
    let p = SimplexField::uniform(q.grid(), 2).unwrap();
    let cfg = TrainConfig {
        lambda_topo: 1.0,
        ..zero_weights()
    };
    assert!((total_loss(&p, &q, &cfg).unwrap() - 7.0 / 12.0).abs() < 1e-6);
}

#[test]
fn topology_toggle_removes_atl() {
    let q = halves(4);
    let p = SimplexField::uniform(q.grid(), 2).unwrap();
    let mut cfg = TrainConfig {
        lambda_topo: 1.0,
        ..zero_weights()
    };
    cfg.toggles.topology_on = false;
    assert_eq!(total_loss(&p, &q, &cfg).unwrap(), seg_loss(&p, &q).unwrap());
}
