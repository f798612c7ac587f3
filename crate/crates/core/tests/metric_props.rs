use proptest::collection::vec;
use proptest::prelude::*;
use veinpipe::metrics::{bce, confusion, mae, mse, multitask_loss, SegMetrics};
use veinpipe::tensor::tape::BCE_EPS;
use veinpipe::tensor::{Tape, Tensor};

fn bits(n: usize) -> impl Strategy<Value = Vec<u8>> {
    vec(0u8..2, n)
}

fn seg(p: &[u8], g: &[u8]) -> SegMetrics {
    SegMetrics::from_counts(&confusion(p, g).unwrap())
}

proptest! {
    #[test]
    fn dice_is_f1_and_bounds_iou((p, g) in (bits(256), bits(256))) {
        let m = seg(&p, &g);
        prop_assert_eq!(m.dice.to_bits(), m.f1.to_bits());
        prop_assert!(m.iou <= m.dice);
        for v in [m.iou, m.dice, m.pixel_accuracy] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let r = seg(&g, &p);
        prop_assert_eq!(m.iou, r.iou);
        prop_assert_eq!(m.dice, r.dice);
    }

    #[test]
    fn regression_losses_are_symmetric_and_nonnegative(
        a in vec(-5.0f64..5.0, 12),
        b in vec(-5.0f64..5.0, 12),
    ) {
        let (ta, tb) = (Tensor::new(vec![12], a).unwrap(), Tensor::new(vec![12], b).unwrap());
        prop_assert!(mse(&ta, &tb).unwrap() >= 0.0);
        prop_assert!(mae(&ta, &tb).unwrap() >= 0.0);
        prop_assert_eq!(mse(&ta, &tb).unwrap(), mse(&tb, &ta).unwrap());
        prop_assert_eq!(mae(&ta, &tb).unwrap(), mae(&tb, &ta).unwrap());
        prop_assert_eq!(mse(&ta, &ta).unwrap(), 0.0);
        prop_assert_eq!(mae(&ta, &ta).unwrap(), 0.0);
        if ta != tb {
            prop_assert!(mse(&ta, &tb).unwrap() > 0.0);
        }
    }

    #[test]
    fn bce_is_nonnegative_and_small_at_confident_truth(
        logits in vec(-8.0f64..8.0, 16),
        targets in bits(16),
    ) {
        let l = Tensor::new(vec![16], logits).unwrap();
        let t = Tensor::new(vec![16], targets.iter().map(|&v| v as f64).collect()).unwrap();
        prop_assert!(bce(&l, &t).unwrap() >= 0.0);
        let sure = t.map(|v| if v > 0.5 { 40.0 } else { -40.0 });
        // the probability clamp leaves exactly -ln(1 - eps) per pixel
        let floor = -(1.0 - BCE_EPS).ln();
        prop_assert!((bce(&sure, &t).unwrap() - floor).abs() < 1e-12);
    }

    #[test]
    fn fossa_gradient_has_closed_form(
        pred in vec(0.01f64..0.99, 6),
        target in vec(0.0f64..1.0, 6),
        logits in vec(-3.0f64..3.0, 8),
    ) {
        let p = Tensor::new(vec![2, 3], pred.clone()).unwrap();
        let t = Tensor::new(vec![2, 3], target.clone()).unwrap();
        let l = Tensor::new(vec![2, 1, 2, 2], logits).unwrap();
        let m = Tensor::from_fn(&[2, 1, 2, 2], |i| (i % 3 == 0) as u8 as f64);
        let mut tape = Tape::new();
        let lv = tape.param("logits", l.clone());
        let pv = tape.param("fossa", p.clone());
        let seg_loss = tape.bce_with_logits(lv, &m).unwrap();
        let reg = tape.mse(pv, &t).unwrap();
        let loss = tape.add(seg_loss, reg).unwrap();
        let value = tape.value(loss).item().unwrap();
        prop_assert!((value - multitask_loss(&l, &m, &p, &t).unwrap()).abs() < 1e-12);
        let g = tape.backward(loss).unwrap();
        let gp = g.get("fossa").unwrap();
        for ((gv, a), b) in gp.data().iter().zip(&pred).zip(&target) {
            prop_assert!((gv - 2.0 * (a - b) / 6.0).abs() < 1e-12);
        }
    }
}
