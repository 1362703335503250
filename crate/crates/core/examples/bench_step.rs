use std::time::Instant;
use tdseg_core::nets::{Denoiser, ModelConfig};
use tdseg_core::tensor::Tensor;
use tdseg_core::rng::rng_for;
use rand::Rng;

fn main() {
    let model = Denoiser::new(ModelConfig::default()).unwrap();
    let params = model.init_params::<f32>(1);
    let mut rng = rng_for(1, "bench", 0, 0);
    let n = 16 * 32 * 32;
    let x: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let img: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let x_t = Tensor::from_vec(&[16, 1, 32, 32], x);
    let image = Tensor::from_vec(&[16, 1, 32, 32], img);
    let ts: Vec<usize> = (1..=16).map(|i| i * 60).collect();

    let t0 = Instant::now();
    let out = model.forward(&params, &x_t, &ts, &image).unwrap();
    let fwd = t0.elapsed();
    let loss = out.eps_hat.mul(&out.eps_hat).mean_all();
    let t1 = Instant::now();
    let _g = loss.backward();
    let bwd = t1.elapsed();
    println!("batch16 fwd {:?} bwd {:?}", fwd, bwd);

    let t2 = Instant::now();
    let out2 = model.forward(&params, &x_t, &ts, &image).unwrap();
    let loss2 = out2.eps_hat.mul(&out2.eps_hat).mean_all().add(&out2.aux_logits.mul(&out2.aux_logits).mean_all());
    let _g2 = loss2.backward();
    println!("full step {:?}", t2.elapsed());
}
