use adt_core::field::{ClassMask, Grid2D, SimplexField};
use adt_core::tensor::{Shape, Tensor};
use adt_core::topology::{overlap_loss, soft_skeleton, SkeletonConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Zhang-Suen thinning on a zero-padded binary image.
fn zhang_suen(bits: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut img = bits.to_vec();
    let at = |img: &[bool], y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && img[y as usize * w + x as usize]
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut kill = Vec::new();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if !at(&img, y, x) {
                        continue;
                    }
                    // P2..P9 clockwise from north
                    let n = [
                        at(&img, y - 1, x),
                        at(&img, y - 1, x + 1),
                        at(&img, y, x + 1),
                        at(&img, y + 1, x + 1),
                        at(&img, y + 1, x),
                        at(&img, y + 1, x - 1),
                        at(&img, y, x - 1),
                        at(&img, y - 1, x - 1),
                    ];
                    let b = n.iter().filter(|&&v| v).count();
                    let a = (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count();
                    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                    let cond = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if (2..=6).contains(&b) && a == 1 && cond {
                        kill.push(y as usize * w + x as usize);
                    }
                }
            }
            changed |= !kill.is_empty();
            for i in kill {
                img[i] = false;
            }
        }
        if !changed {
            return img;
        }
    }
}

#[test]
fn bar_skeleton_matches_thinning_on_interior() {
    let (h, w) = (11, 30);
    let (rows, cols) = (4..7, 5..25);
    let bar = ClassMask::from_fn(h, w, |y, x| rows.contains(&y) && cols.contains(&x));
    let soft = soft_skeleton(bar.to_plane().data(), h, w, &SkeletonConfig::default());
    let thin = zhang_suen(bar.bits(), h, w);
    // the two disagree only near the bar ends, where endpoint rules differ
    let mut interior = 0;
    for y in 0..h {
        for x in cols.start + 2..cols.end - 2 {
            let i = y * w + x;
            assert_eq!(soft[i], if thin[i] { 1.0 } else { 0.0 }, "({y}, {x})");
            interior += usize::from(thin[i]);
        }
    }
    assert_eq!(interior, cols.len() - 4);
    assert!(soft.iter().zip(bar.bits()).all(|(s, &b)| b || *s == 0.0));
}

fn field(values: Vec<f64>, k: usize, n: usize) -> SimplexField {
    SimplexField::new(Grid2D::square(n).unwrap(), Tensor::from_vec(Shape::new(k, n, n), values)).unwrap()
}

#[test]
fn overlap_vanishes_on_one_hot_fields() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 2..6 {
        let labels: Vec<usize> = (0..64).map(|_| rng.gen_range(0..k)).collect();
        let p = SimplexField::one_hot(Grid2D::square(8).unwrap(), k, &labels).unwrap();
        assert!(overlap_loss(&p).unwrap().abs() <= 1e-9);
    }
}

#[test]
fn overlap_is_positive_off_the_vertices() {
    // a single soft pixel in an otherwise one-hot field is enough
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..20 {
        let (k, n) = (3, 8);
        let mut v = vec![0.0; k * n * n];
        for i in 0..n * n {
            v[(i % k) * n * n + i] = 1.0;
        }
        let i = rng.gen_range(0..n * n);
        let a = rng.gen_range(1e-3..0.5);
        for c in 0..k {
            v[c * n * n + i] = 0.0;
        }
        v[i] = 1.0 - a;
        v[n * n + i] = a;
        let l = overlap_loss(&field(v, k, n)).unwrap();
        assert!(l > 1e-9, "trial {trial}: {l:e}");
    }
}
