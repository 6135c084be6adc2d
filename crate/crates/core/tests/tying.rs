//! Tied residual units: parameter accounting and gradient accumulation.

use pcarn_core::generator::{build_generator, Generator, ModelSpec, ResidualUnit};
use pcarn_core::nn::InitScheme;
use pcarn_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(tied: bool) -> ModelSpec {
    ModelSpec {
        blocks: 2,
        units: 3,
        channels: 8,
        group: 2,
        tied,
        efficient: true,
        scales: vec![2],
    }
}

fn unit_params(unit: &ResidualUnit) -> usize {
    unit.convs().iter().map(|c| c.spec.param_count()).sum()
}

#[test]
fn tied_block_holds_one_unit_of_parameters() {
    let tied: Generator<f32> = build_generator(&spec(true), InitScheme::default(), 0).unwrap();
    let untied: Generator<f32> = build_generator(&spec(false), InitScheme::default(), 0).unwrap();
    for (bt, bu) in tied.blocks.iter().zip(&untied.blocks) {
        let one = unit_params(&bt.units[0]);
        assert_eq!(bt.unit_params(), one);
        assert_eq!(bu.unit_params(), 3 * one);
    }
    let per_block = unit_params(&tied.blocks[0].units[0]);
    assert_eq!(untied.num_params() - tied.num_params(), 2 * 2 * per_block);
    // Every later unit aliases the first unit's tensors.
    for b in 0..2 {
        for u in 1..3 {
            for part in ["conv1", "conv2", "pointwise"] {
                for kind in ["weight", "bias"] {
                    let name = format!("body.{b}.unit.{u}.{part}.{kind}");
                    let canonical = format!("body.{b}.unit.0.{part}.{kind}");
                    assert_eq!(tied.store.resolve(&name), tied.store.resolve(&canonical), "{name}");
                }
            }
        }
    }
}

#[test]
fn tied_gradient_is_sum_over_call_sites() {
    let tied: Generator<f64> = build_generator(&spec(true), InitScheme::default(), 3).unwrap();
    let mut clones: Generator<f64> = build_generator(&spec(false), InitScheme::default(), 99).unwrap();
    // Give the untied model identical values at every site.
    let names: Vec<String> = clones.store.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let src = tied.store.resolve(name).expect("every untied name exists in the tied model");
        let dst = clones.store.resolve(name).unwrap();
        *clones.store.get_mut(dst) = tied.store.get(src).clone();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Tensor<f64> = Tensor::from_fn([2, 3, 6, 5], |_, _, _, _| rng.gen_range(0.0..1.0));
    let target: Tensor<f64> = Tensor::from_fn([2, 3, 12, 10], |_, _, _, _| rng.gen_range(0.0..1.0));

    let grads = |g: &mut Generator<f64>| {
        let tape = Tape::new();
        let p = g.store.bind(&tape, true);
        let xv = tape.constant(x.clone());
        let out = g.forward(&tape, &p, &xv, 2).unwrap();
        let loss = tape.l2(&out, &tape.constant(target.clone())).unwrap();
        let mut gr = tape.backward(&loss).unwrap();
        g.store.absorb_grads(&p, &mut gr);
        loss.item()
    };
    let mut tied = tied;
    let loss_tied = grads(&mut tied);
    let loss_clones = grads(&mut clones);
    assert!((loss_tied - loss_clones).abs() < 1e-12);

    let mut checked = 0;
    for b in 0..2 {
        for part in ["conv1", "conv2", "pointwise"] {
            for kind in ["weight", "bias"] {
                let canonical = format!("body.{b}.unit.0.{part}.{kind}");
                let tied_grad = tied.store.grad(tied.store.resolve(&canonical).unwrap()).unwrap();
                let mut sum = Tensor::<f64>::zeros(tied_grad.shape());
                for u in 0..3 {
                    let site = clones.store.resolve(&format!("body.{b}.unit.{u}.{part}.{kind}")).unwrap();
                    sum.add_assign(clones.store.grad(site).unwrap());
                }
                let err = tied_grad.max_abs_diff(&sum);
                assert!(err < 1e-6, "{canonical}: {err}");
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 12);
    // Parameters outside the residual units see identical gradients.
    for name in ["entry.weight", "body.1.fuse.2.weight", "fuse.0.bias", "up2.0.weight", "exit.weight"] {
        let a = tied.store.grad(tied.store.resolve(name).unwrap()).unwrap();
        let b = clones.store.grad(clones.store.resolve(name).unwrap()).unwrap();
        assert!(a.max_abs_diff(b) < 1e-9, "{name}");
    }
}
