//! Bisection harness for the critic-path gradient mismatch.

use ndarray::{Array2, ArrayD};
use oarseg_core::autodiff::Tape;
use oarseg_core::models::critic::{build_discriminator, stack_nchw, CriticInputNodes, DiscriminatorConfig};
use oarseg_core::models::unet::ParamBinding;
use oarseg_core::models::{DiscriminatorKind, Parameters};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss_fn(critic_params: &Parameters, fake: &ndarray::Array4<f64>, real: &ndarray::Array4<f64>, kind: DiscriminatorKind, base: usize) -> (f64, Option<(Tape, ParamBinding, usize)>) {
    let (critic, _) = build_discriminator(DiscriminatorConfig { kind, base_channels: base, leaky_slope: 0.2 }, 0);
    let mut tape = Tape::new();
    let bind = ParamBinding::bind(&mut tape, critic_params);
    let f = tape.leaf4(fake.clone());
    let r = tape.leaf4(real.clone());
    let sf = critic.forward(&mut tape, &bind, CriticInputNodes::Single(f));
    let sr = critic.forward(&mut tape, &bind, CriticInputNodes::Single(r));
    let mf = tape.mean_all(sf);
    let mr = tape.mean_all(sr);
    let gap = tape.sub(mr, mf);
    let v = tape.scalar(gap);
    (v, Some((tape, bind, gap)))
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let kind = DiscriminatorKind::Product;
    let base = 2;
    let (_, params) = build_discriminator(DiscriminatorConfig { kind, base_channels: base, leaky_slope: 0.2 }, 31);

    let imgs: Vec<Array2<f64>> = (0..2)
        .map(|_| Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..1.0)))
        .collect();
    let masks: Vec<Array2<f64>> = (0..2)
        .map(|_| Array2::from_shape_fn((8, 8), |_| rng.random_range(-0.3..0.3)))
        .collect();
    let fake_slices: Vec<Array2<f64>> = imgs.iter().zip(&masks).map(|(i, m)| i * m).collect();
    let fake = stack_nchw(&fake_slices).unwrap();
    let real = stack_nchw(&imgs).unwrap();

    let (_, ctx) = loss_fn(&params, &fake, &real, kind, base);
    let (tape, bind, gap) = ctx.unwrap();
    let grads = tape.backward(gap);

    let h = 1e-6;
    let mut worst = (0.0f64, String::new());
    for name in params.names() {
        let arr = params.get(name);
        for flat in 0..arr.len() {
            let analytic = grads
                .get(bind.get(name))
                .map(|g: &ArrayD<f64>| g.as_slice().unwrap()[flat])
                .unwrap_or(0.0);
            let mut p2 = params.clone();
            p2.get_mut(name).as_slice_mut().unwrap()[flat] += h;
            let (fp, _) = loss_fn(&p2, &fake, &real, kind, base);
            let mut p3 = params.clone();
            p3.get_mut(name).as_slice_mut().unwrap()[flat] -= h;
            let (fm, _) = loss_fn(&p3, &fake, &real, kind, base);
            let numeric = (fp - fm) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-10);
            let rel = (analytic - numeric).abs() / denom;
            if rel > worst.0 {
                worst = (rel, format!("{name}[{flat}]: analytic {analytic} vs fd {numeric}"));
            }
        }
    }
    println!("worst rel err: {:.3e} at {}", worst.0, worst.1);
}
