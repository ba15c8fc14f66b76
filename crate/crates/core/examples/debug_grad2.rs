//! Full composite-path gradient scan, mirroring the acceptance setup.

use ndarray::Array2;
use oarseg_core::adversarial::composite_loss_on_tape;
use oarseg_core::autodiff::Tape;
use oarseg_core::models::critic::{build_discriminator, stack_nchw, DiscriminatorConfig};
use oarseg_core::models::unet::{build_generator, GeneratorConfig, ParamBinding};
use oarseg_core::models::{DiscriminatorKind, Parameters};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn total(
    gen_params: &Parameters,
    critic_params: &Parameters,
    images: &[Array2<f64>],
    gts: &[Array2<u8>],
) -> f64 {
    let (gen, _) = build_generator(
        GeneratorConfig { depth: 2, base_channels: 4, ..Default::default() },
        0,
    )
    .unwrap();
    let (critic, _) = build_discriminator(
        DiscriminatorConfig { kind: DiscriminatorKind::Product, base_channels: 2, leaky_slope: 0.2 },
        0,
    );
    let mut tape = Tape::new();
    let gen_bind = ParamBinding::bind(&mut tape, gen_params);
    let critic_bind = ParamBinding::bind(&mut tape, critic_params);
    let input = tape.leaf4(stack_nchw(images).unwrap());
    let logits = gen.forward(&mut tape, &gen_bind, input);
    let nodes = composite_loss_on_tape(&mut tape, &critic, &critic_bind, logits, images, gts, 1.0).unwrap();
    tape.scalar(nodes.total)
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let (gen, gen_params) = build_generator(
        GeneratorConfig { depth: 2, base_channels: 4, ..Default::default() },
        11,
    )
    .unwrap();
    let (critic, critic_params) = build_discriminator(
        DiscriminatorConfig { kind: DiscriminatorKind::Product, base_channels: 2, leaky_slope: 0.2 },
        31,
    );

    let images: Vec<Array2<f64>> = (0..2)
        .map(|_| Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..1.0)))
        .collect();
    let gts: Vec<Array2<u8>> = (0..2)
        .map(|_| {
            let mut g = Array2::<u8>::zeros((8, 8));
            for y in 2..5 {
                for x in 2..5 {
                    g[[y, x]] = 1;
                }
            }
            g
        })
        .collect();

    // analytic
    let mut tape = Tape::new();
    let gen_bind = ParamBinding::bind(&mut tape, &gen_params);
    let critic_bind = ParamBinding::bind(&mut tape, &critic_params);
    let input = tape.leaf4(stack_nchw(&images).unwrap());
    let logits = gen.forward(&mut tape, &gen_bind, input);
    let nodes = composite_loss_on_tape(&mut tape, &critic, &critic_bind, logits, &images, &gts, 1.0).unwrap();
    let grads = tape.backward(nodes.total);

    let h = 1e-6;
    for (label, params, bind) in [
        ("critic", &critic_params, &critic_bind),
        ("gen", &gen_params, &gen_bind),
    ] {
        let mut worst = (0.0f64, String::new());
        for name in params.names() {
            let arr = params.get(name);
            for flat in 0..arr.len() {
                let analytic = grads
                    .get(bind.get(name))
                    .map(|g| g.as_slice().unwrap()[flat])
                    .unwrap_or(0.0);
                let mut perturb = |d: f64| {
                    let mut gp = gen_params.clone();
                    let mut cp = critic_params.clone();
                    let target = if label == "critic" { &mut cp } else { &mut gp };
                    target.get_mut(name).as_slice_mut().unwrap()[flat] += d;
                    total(&gp, &cp, &images, &gts)
                };
                let numeric = (perturb(h) - perturb(-h)) / (2.0 * h);
                let denom = analytic.abs().max(numeric.abs());
                if denom < 1e-7 {
                    continue;
                }
                let rel = (analytic - numeric).abs() / denom;
                if rel > worst.0 {
                    worst = (rel, format!("{name}[{flat}]: analytic {analytic} vs fd {numeric}"));
                }
            }
        }
        println!("{label}: worst rel err {:.3e} at {}", worst.0, worst.1);
    }
}
