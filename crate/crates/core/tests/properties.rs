use proptest::prelude::*;
use stoic_core::data::{encode_ppm, parse_ppm_header, pixel_byte};
use stoic_core::diffusion::{forward_sample, reconstruct_x0, NoiseSchedule};
use stoic_core::numerics::{attention_probs, conv2d, conv_out_extent, layer_norm, Tensor};

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_backward_is_the_adjoint(
        (h, w, k, stride, padding) in (3usize..7, 3usize..7, 1usize..4, 1usize..3, 0usize..2),
        seed in values(512),
    ) {
        let (c_in, c_out) = (2, 3);
        let (oh, ow) = (conv_out_extent(h, k, stride, padding).unwrap(), conv_out_extent(w, k, stride, padding).unwrap());
        let take = |off: usize, n: usize| (0..n).map(|i| seed[(off + i * 7) % seed.len()]).collect::<Vec<_>>();
        let x = Tensor::from_vec(take(0, c_in * h * w), &[1, c_in, h, w]).unwrap().with_requires_grad(true);
        let weight = Tensor::from_vec(take(3, c_out * c_in * k * k), &[c_out, c_in, k, k]).unwrap();
        let bias = Tensor::zeros(&[c_out]);
        let y = Tensor::from_vec(take(5, c_out * oh * ow), &[1, c_out, oh, ow]).unwrap();
        let out = conv2d(&x, &weight, &bias, stride, padding).unwrap();
        prop_assert_eq!(out.shape(), &[1, c_out, oh, ow]);
        let lhs = out.dot(&y).unwrap();
        lhs.backward().unwrap();
        let rhs: f64 = x.grad().unwrap().iter().zip(x.data()).map(|(g, v)| g * v).sum();
        prop_assert!((lhs.item().unwrap() - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
    }

    #[test]
    fn layer_norm_rows_are_standardized(rows in 1usize..5, width in 2usize..24, data in values(96)) {
        let row: Vec<f64> = (0..rows * width).map(|i| data[i % data.len()] + i as f64 * 0.01).collect();
        let x = Tensor::from_vec(row, &[rows, width]).unwrap();
        let y = layer_norm(&x, &Tensor::ones(&[width]), &Tensor::zeros(&[width]), 1e-12).unwrap();
        for r in y.data().chunks(width) {
            let mean = r.iter().sum::<f64>() / width as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_rows_are_distributions(tokens in 1usize..6, heads in 1usize..4, data in values(240)) {
        let width = heads * 4;
        let qkv = Tensor::from_vec((0..2 * tokens * 3 * width).map(|i| 3.0 * data[i % data.len()]).collect(), &[2, tokens, 3 * width]).unwrap();
        let probs = attention_probs(&qkv, heads).unwrap();
        prop_assert_eq!(probs.len(), 2 * heads * tokens * tokens);
        for r in probs.chunks(tokens) {
            prop_assert!(r.iter().all(|p| *p >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scaled_schedules_decrease(steps in 50usize..2000) {
        let s = NoiseSchedule::scaled(steps).unwrap();
        prop_assert!((1..=steps).all(|t| s.alpha_bar_at(t) < s.alpha_bar_at(t - 1) && s.alpha_bar_at(t) > 0.0));
    }

    #[test]
    fn f64_reconstruction_inverts_the_forward_process(t in 1usize..=1000, x in values(12), e in values(12)) {
        let sched = NoiseSchedule::scaled(1000).unwrap();
        let x0 = Tensor::from_vec(x, &[1, 3, 2, 2]).unwrap();
        let eps = Tensor::from_vec(e, &[1, 3, 2, 2]).unwrap();
        let back = reconstruct_x0(&forward_sample(&x0, t, &eps, &sched).unwrap(), &eps, t, &sched).unwrap();
        prop_assert!(back.data().iter().zip(x0.data()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn ppm_round_trips_header_and_bytes(h in 1usize..6, w in 1usize..6, data in values(75)) {
        let img = Tensor::from_vec(data[..3 * h * w].to_vec(), &[3, h, w]).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        let ((pw, ph, max), offset) = parse_ppm_header(&bytes).unwrap();
        prop_assert_eq!((pw, ph, max), (w, h, 255));
        prop_assert_eq!(bytes.len() - offset, 3 * h * w);
        prop_assert_eq!(bytes[offset], pixel_byte(img.data()[0]));
    }
}
