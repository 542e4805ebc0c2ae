use gphm::linalg;
use ndarray::Array2;
use std::time::Instant;

fn main() {
    let n = 400;
    let b = Array2::from_shape_fn((n, n), |(i, j)| ((i * 7 + j * 3) as f64 * 0.01).sin());
    let a = b.dot(&b.t()) + Array2::<f64>::eye(n) * (n as f64);
    let reps = 50;

    let t = Instant::now();
    for _ in 0..reps {
        let mut l = a.clone();
        linalg::cholesky_in_place(&mut l).unwrap();
    }
    println!("cholesky 400: {:.2} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let mut l = a.clone();
    linalg::cholesky_in_place(&mut l).unwrap();

    let t = Instant::now();
    for _ in 0..reps {
        let _inv = linalg::spd_inverse_from_chol(&l.view());
    }
    println!("spd_inverse 400: {:.2} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let _c = a.dot(&a);
    }
    println!("gemm 400^3: {:.2} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let rhs = Array2::from_shape_fn((n, 4), |(i, j)| ((i + j) as f64).cos());
    let t = Instant::now();
    for _ in 0..reps {
        let _x = linalg::spd_solve(&l.view(), &rhs);
    }
    println!("spd_solve 400x4: {:.2} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}
