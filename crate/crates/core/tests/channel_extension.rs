use std::collections::BTreeMap;

use proptest::prelude::{prop_assert, proptest, ProptestConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cellmorph::nn::{presets, Network, Tensor};

/// A 5-channel copy of `rgb` whose first-conv weights on the two mask
/// channels are zero.
fn extend(rgb: &Network, size: usize) -> Network {
    let src: BTreeMap<String, Tensor> = rgb.params().into_iter().map(|(n, p)| (n, p.value.clone())).collect();
    let mut net = Network::build(&presets::cellnet_s(size, 5, 2)).unwrap();
    net.visit_params_mut(|name, p| {
        let from = &src[name];
        if name == "conv1.weight" {
            let [o, kh, kw, _] = *p.value.shape() else {
                panic!("conv weight rank")
            };
            let dst = p.value.data_mut();
            for i in 0..o * kh * kw {
                for c in 0..5 {
                    dst[i * 5 + c] = if c < 3 { from.data()[i * 3 + c] } else { 0.0 };
                }
            }
        } else {
            p.value.data_mut().copy_from_slice(from.data());
        }
    });
    net
}

fn random_net(size: usize, rng: &mut ChaCha8Rng) -> Network {
    let mut net = Network::build(&presets::cellnet_s(size, 3, 2)).unwrap();
    net.visit_params_mut(|_, p| {
        p.value
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.random_range(-0.3..0.3))
    });
    net
}

fn outputs(size: usize, seed: u64, mask_value: Option<f32>) -> (Vec<f32>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rgb = random_net(size, &mut rng);
    let five = extend(&rgb, size);
    let b = 2;
    let x3: Vec<f32> = (0..b * size * size * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut x5 = Vec::with_capacity(b * size * size * 5);
    for px in x3.chunks(3) {
        x5.extend_from_slice(px);
        let m = mask_value.unwrap_or_else(|| rng.random_range(0.0..1.0));
        x5.extend_from_slice(&[m, m]);
    }
    let y3 = rgb.infer(&Tensor::from_vec(&[b, size, size, 3], x3).unwrap()).unwrap();
    let y5 = five.infer(&Tensor::from_vec(&[b, size, size, 5], x5).unwrap()).unwrap();
    (y3.into_vec(), y5.into_vec())
}

#[test]
fn zeroed_masks_reproduce_rgb_output() {
    let (y3, y5) = outputs(20, 1, Some(0.0));
    assert_eq!(y3, y5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_mask_weights_ignore_mask_contents(seed: u64, size in 12usize..24) {
        let (y3, y5) = outputs(size, seed, None);
        for (a, b) in y3.iter().zip(&y5) {
            prop_assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }
}
