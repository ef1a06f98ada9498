//! Central finite-difference checks for every differentiable op.

mod common;

use common::{gradcheck, gradcheck_with, Input, FD_TOL};
use reconprune::losses::{mse, ssim, stream_loss, total_loss, LossConfig};
use reconprune::tensor::{Graph, Var};

fn assert_close(name: &str, inputs: &[Input], build: &dyn Fn(&mut Graph<f32>, &[Var]) -> Var) {
    let r = gradcheck(inputs, build);
    assert!(r.rel_err < FD_TOL, "{name}: relative error {:.3e}", r.rel_err);
}

fn positive(shape: &[usize], seed: u64) -> Input {
    Input::random(shape, seed, 0.5, 2.0)
}

fn signed(shape: &[usize], seed: u64) -> Input {
    Input::random(shape, seed, -1.0, 1.0)
}

#[test]
fn elementwise_binary_ops() {
    let ins = [signed(&[2, 3], 1), positive(&[2, 3], 2)];
    assert_close("add", &ins, &|g, v| g.add(v[0], v[1]).unwrap());
    assert_close("sub", &ins, &|g, v| g.sub(v[0], v[1]).unwrap());
    assert_close("mul", &ins, &|g, v| g.mul(v[0], v[1]).unwrap());
    assert_close("div", &ins, &|g, v| g.div(v[0], v[1]).unwrap());
}

#[test]
fn elementwise_unary_ops() {
    let ins = [signed(&[3, 4], 3)];
    assert_close("add_scalar", &ins, &|g, v| g.add_scalar(v[0], 0.7).unwrap());
    assert_close("mul_scalar", &ins, &|g, v| g.mul_scalar(v[0], -1.3).unwrap());
    assert_close("neg", &ins, &|g, v| g.neg(v[0]).unwrap());
    assert_close("rsub_scalar", &ins, &|g, v| g.rsub_scalar(1.0, v[0]).unwrap());
    assert_close("square", &ins, &|g, v| g.square(v[0]).unwrap());
    assert_close("sigmoid", &ins, &|g, v| g.sigmoid(v[0]).unwrap());
    assert_close("silu", &ins, &|g, v| g.silu(v[0]).unwrap());
}

#[test]
fn bias_and_row_scaling() {
    let ins = [signed(&[2, 3, 4], 4), signed(&[4], 5)];
    assert_close("add_bias", &ins, &|g, v| g.add_bias(v[0], v[1]).unwrap());
    let ins = [signed(&[2, 3, 4], 6), signed(&[2, 3, 1], 7)];
    assert_close("scale_rows", &ins, &|g, v| g.scale_rows(v[0], v[1]).unwrap());
}

#[test]
fn repeat_reshape_permute_transpose() {
    let ins = [signed(&[2, 1, 3], 8)];
    assert_close("repeat", &ins, &|g, v| g.repeat(v[0], 1, 4).unwrap());
    let ins = [signed(&[2, 3, 4], 9)];
    assert_close("reshape", &ins, &|g, v| g.reshape(v[0], &[6, 4]).unwrap());
    assert_close("permute", &ins, &|g, v| g.permute(v[0], &[2, 0, 1]).unwrap());
    let ins = [signed(&[3, 5], 10)];
    assert_close("transpose", &ins, &|g, v| g.transpose(v[0]).unwrap());
}

#[test]
fn matmul_all_transpose_combinations() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let sb = if tb { [2, 5, 4] } else { [2, 4, 5] };
        let ins = [signed(&sa, 11), signed(&sb, 12)];
        assert_close(&format!("matmul_ex({ta},{tb})"), &ins, &|g, v| {
            g.matmul_ex(v[0], ta, v[1], tb).unwrap()
        });
    }
    let ins = [signed(&[3, 4], 13), signed(&[4, 2], 14)];
    assert_close("matmul", &ins, &|g, v| g.matmul(v[0], v[1]).unwrap());
    let ins = [signed(&[3, 4], 15), signed(&[2, 4], 16)];
    assert_close("matmul_nt", &ins, &|g, v| g.matmul_nt(v[0], v[1]).unwrap());
}

#[test]
fn concat_slice_gather() {
    let ins = [signed(&[2, 3, 2], 17), signed(&[2, 1, 2], 18)];
    assert_close("concat", &ins, &|g, v| g.concat(&[v[0], v[1]], 1).unwrap());
    let ins = [signed(&[2, 5, 3], 19)];
    assert_close("slice", &ins, &|g, v| g.slice(v[0], 1, 1, 3).unwrap());
    let ins = [signed(&[5, 3], 20)];
    assert_close("gather_rows", &ins, &|g, v| g.gather_rows(v[0], &[4, 0, 0, 2]).unwrap());
}

#[test]
fn softmax_and_layer_norm() {
    let ins = [Input::random(&[3, 6], 21, -2.0, 2.0)];
    assert_close("softmax", &ins, &|g, v| g.softmax(v[0]).unwrap());
    let ins = [
        Input::random(&[4, 6], 22, -2.0, 2.0),
        Input::random(&[6], 23, 0.5, 1.5),
        signed(&[6], 24),
    ];
    assert_close("layer_norm", &ins, &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
}

#[test]
fn reductions() {
    let ins = [signed(&[3, 4], 25)];
    assert_close("sum", &ins, &|g, v| g.sum(v[0]).unwrap());
    assert_close("mean", &ins, &|g, v| g.mean(v[0]).unwrap());
}

#[test]
fn pooling_and_filtering() {
    let ins = [signed(&[2, 4, 6], 26)];
    assert_close("avg_pool2d", &ins, &|g, v| g.avg_pool2d(v[0], 2).unwrap());
    let ins = [signed(&[2, 6, 7], 27)];
    let kernel = [0.2f32, 0.5, 0.3];
    assert_close("filter2d", &ins, &|g, v| g.filter2d(v[0], &kernel).unwrap());
}

#[test]
fn bce_with_logits() {
    let ins = [Input::random(&[2, 4], 28, -3.0, 3.0)];
    let targets = [1.0f32, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
    assert_close("bce_with_logits", &ins, &|g, v| g.bce_with_logits(v[0], &targets).unwrap());
}

#[test]
fn stop_grad_against_frozen_oracle() {
    // x ⊙ stop_grad(x) differentiates like x ⊙ c with c frozen at x₀.
    let x0 = signed(&[2, 3], 29);
    let frozen = x0.data.clone();
    let r = gradcheck_with(
        &[x0],
        &|g, v| {
            let s = g.stop_grad(v[0]).unwrap();
            g.mul(v[0], s).unwrap()
        },
        &|g, v| {
            let c = g.constant(&[2, 3], frozen.clone()).unwrap();
            g.mul(v[0], c).unwrap()
        },
    );
    assert!(r.rel_err < FD_TOL, "stop_grad: {:.3e}", r.rel_err);
}

#[test]
fn ste_threshold_against_surrogate() {
    // Forward is the hard step; backward matches S + c with c frozen.
    let s0 = Input::new(&[2, 4], vec![0.3, -0.2, 0.05, -0.7, 0.9, -0.01, 0.4, -0.5]);
    let offset: Vec<f32> = s0.data.iter().map(|&s| if s > 0.0 { 1.0 - s } else { -s }).collect();
    let r = gradcheck_with(
        &[s0],
        &|g, v| {
            let m = g.ste_threshold(v[0]).unwrap();
            let t = g.constant(&[2, 4], vec![1.5, -0.5, 2.0, 0.25, -1.0, 0.75, 0.5, 1.25]).unwrap();
            g.mul(m, t).unwrap()
        },
        &|g, v| {
            let c = g.constant(&[2, 4], offset.clone()).unwrap();
            let m = g.add(v[0], c).unwrap();
            let t = g.constant(&[2, 4], vec![1.5, -0.5, 2.0, 0.25, -1.0, 0.75, 0.5, 1.25]).unwrap();
            g.mul(m, t).unwrap()
        },
    );
    assert!(r.rel_err < FD_TOL, "ste: {:.3e}", r.rel_err);
}

fn small_loss_cfg() -> LossConfig {
    LossConfig {
        ssim_window: 3,
        ssim_sigma: 1.0,
        ..Default::default()
    }
}

#[test]
fn losses() {
    let cfg = small_loss_cfg();
    let ins = [Input::random(&[6, 6, 3], 30, 0.0, 1.0), Input::random(&[6, 6, 3], 31, 0.0, 1.0)];
    assert_close("mse", &ins, &|g, v| mse(g, v[0], v[1]).unwrap());
    assert_close("ssim", &ins, &|g, v| ssim(g, v[0], v[1], &cfg).unwrap());
    assert_close("stream_loss", &ins, &|g, v| stream_loss(g, v[0], v[1], &cfg).unwrap());
    let ins = [Input::random(&[1], 32, 0.0, 1.0), Input::random(&[1], 33, 0.0, 1.0)];
    assert_close("total_loss", &ins, &|g, v| total_loss(g, v[0], v[1], &cfg).unwrap());
}

#[test]
fn batched_ssim() {
    let cfg = small_loss_cfg();
    let ins = [Input::random(&[2, 5, 5, 3], 34, 0.0, 1.0), Input::random(&[2, 5, 5, 3], 35, 0.0, 1.0)];
    assert_close("ssim batched", &ins, &|g, v| ssim(g, v[0], v[1], &cfg).unwrap());
}
