use mocca_core::diffcore::{grad_check, Tensor};
use mocca_core::model::random_tensor;

#[test]
fn conv_then_mse_matches_finite_differences() {
    let x = random_tensor(&[1, 4, 4, 1], -1.0, 1.0, 1);
    let k = random_tensor(&[3, 3, 1, 2], -0.5, 0.5, 2);
    let target = random_tensor(&[1, 4, 4, 2], -1.0, 1.0, 3);
    let wrt_kernel = grad_check(
        |t, kv| {
            let xv = t.constant(x.clone());
            let y = t.conv2d(xv, kv, None, 1, 1)?;
            let tv = t.constant(target.clone());
            t.mse(y, tv)
        },
        &k,
        1e-3,
        1e-3,
    )
    .unwrap();
    assert!(wrt_kernel.passed, "{:?}", wrt_kernel.failure);
    let wrt_input = grad_check(
        |t, xv| {
            let kv = t.constant(k.clone());
            let y = t.conv2d(xv, kv, None, 1, 1)?;
            let tv = t.constant(target.clone());
            t.mse(y, tv)
        },
        &x,
        1e-3,
        1e-3,
    )
    .unwrap();
    assert!(wrt_input.passed, "{}", wrt_input.max_deviation);
}

#[test]
fn conv_is_cross_correlation() {
    // 3x3 input, 2x2 kernel, no padding: out[0,0] = 1*1 + 2*0 + 4*0 + 5*1
    let x = Tensor::new(vec![1, 3, 3, 1], (1..=9).map(|v| v as f32).collect()).unwrap();
    let k = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let mut t = mocca_core::diffcore::Tape::new();
    let (xv, kv) = (t.constant(x), t.constant(k));
    let y = t.conv2d(xv, kv, None, 1, 0).unwrap();
    assert_eq!(t.value(y).shape(), &[1, 2, 2, 1]);
    assert_eq!(t.value(y).data(), &[6.0, 8.0, 12.0, 14.0]);
}
