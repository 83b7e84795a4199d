mod common;

use common::GradReport;

fn assert_all(reports: Vec<GradReport>) {
    for r in &reports {
        assert!(r.covered(), "{}: {} of {} coordinates", r.name, r.coords, r.len);
        assert!(r.ok(), "{}: max relative error {:.3e} over {} coordinates", r.name, r.max_rel, r.coords);
    }
}

#[test]
fn conv_gradients() {
    for seed in [1, 11] {
        assert_all(common::conv_layer(seed));
    }
}

#[test]
fn fc_gradients() {
    assert_all(common::fc_layer(2));
}

#[test]
fn relu_gradients() {
    assert_all(common::relu_layer(3));
}

#[test]
fn maxpool_gradients() {
    assert_all(common::pool_layer(4));
}

#[test]
fn dropout_gradients() {
    assert_all(common::dropout_layer(5));
}

#[test]
fn softmax_cross_entropy_gradients() {
    assert_all(common::softmax_loss(6));
}

#[test]
fn desk_network_gradients() {
    let reports = common::desk_network(7);
    assert_eq!(reports.len(), 11);
    for r in &reports {
        assert!(r.covered(), "{}: {} of {} coordinates", r.name, r.coords, r.len);
    }
    assert_all(reports);
}
