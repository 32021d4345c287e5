mod common;

use common::checks;
use edgert::bench::parse_shapes;

#[test]
fn report_validates_for_reference_shapes() {
    let shapes = parse_shapes("128/16,256/32").unwrap();
    checks::bench_report_checks(&shapes, &checks::load_schema()).assert();
}

#[test]
fn replay_step_not_slower_than_eager() {
    let shape = parse_shapes("64/64").unwrap()[0];
    let (replay, eager) = checks::replay_vs_eager(shape, 5);
    println!("median step: replay {replay:.4} ms, eager {eager:.4} ms");
    assert!(replay <= 1.05 * eager, "replay {replay} ms vs eager {eager} ms");
}
