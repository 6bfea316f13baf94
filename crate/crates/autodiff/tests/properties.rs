use hgs_autodiff::{Checkpoint, Graph, ParamStore, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let n = values.len();
        let g = Graph::new();
        let y = g.constant(Tensor::new(&[n], values).unwrap()).softmax(0).unwrap();
        prop_assert!((y.value().sum() - 1.0).abs() < 1e-12);
        prop_assert!(y.value().data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn grad_shapes_match_leaves(h in 1usize..5, w in 1usize..5, c in 1usize..4) {
        let g = Graph::new();
        let x = g.param(Tensor::from_fn(&[1, h, w, c], |i| (i as f64 * 0.37).sin()));
        let b = g.param(Tensor::ones(&[c]));
        let y = x.add(&b).unwrap().sigmoid().unwrap().bilinear_resize(h + 1, w + 2).unwrap().sum_all();
        let grads = g.backward(&y, None).unwrap();
        prop_assert_eq!(grads.get(&x).unwrap().shape(), x.shape());
        prop_assert_eq!(grads.get(&b).unwrap().shape(), b.shape());
    }

    #[test]
    fn checkpoint_round_trip_is_exact_for_f32_values(
        values in prop::collection::vec(-1e6f32..1e6, 1..64)
    ) {
        let n = values.len();
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[n], values.iter().map(|&v| v as f64).collect()).unwrap());
        let back = Checkpoint::from_bytes(&Checkpoint::new(store.clone()).to_bytes()).unwrap();
        prop_assert_eq!(back.params, store);
    }
}
