use dartlab::autodiff::{ParamId, ParamStore, Tape, Tensor};

fn setup() -> (ParamStore, ParamId) {
    let mut store = ParamStore::new();
    let w = store.register("w", Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap(), true);
    (store, w)
}

/// Backward of `sum(w * c)`, whose gradient is `c`.
fn pass(store: &mut ParamStore, w: ParamId, c: [f64; 3]) {
    let mut tape = Tape::new();
    let wv = tape.param(store, w);
    let cv = tape.constant(Tensor::new(vec![1, 3], c.to_vec()).unwrap());
    let prod = tape.mul(wv, cv).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss, store).unwrap();
}

#[test]
fn zero_grad_clears_everything() {
    let (mut store, w) = setup();
    pass(&mut store, w, [1.0, 2.0, 3.0]);
    assert!(store.grad_norm(&[w]) > 0.0);
    store.zero_grad();
    assert_eq!(store.grad_norm(&[w]), 0.0);
}

#[test]
fn snapshots_are_independent_with_zero_grad_and_add_without() {
    let (mut store, w) = setup();
    let (c1, c2) = ([1.0, 0.0, 2.0], [-3.0, 0.5, 0.0]);
    pass(&mut store, w, c1);
    let s1 = store.flat_grad(&[w]);
    store.zero_grad();
    pass(&mut store, w, c2);
    let s2 = store.flat_grad(&[w]);
    assert_eq!(s1, c1.to_vec());
    assert_eq!(s2, c2.to_vec());
    store.zero_grad();
    pass(&mut store, w, c1);
    pass(&mut store, w, c2);
    let both = store.flat_grad(&[w]);
    for i in 0..3 {
        assert_eq!(both[i], s1[i] + s2[i]);
    }
}
