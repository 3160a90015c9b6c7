use packsim_bench::characteristics;
use packsim_core::bus::{solve_bus_constant_power, solve_bus_resistive};

#[test]
fn fixtures_solve() {
    for n in [1, 3, 16, 128] {
        let chars = characteristics(n);
        assert_eq!(chars.len(), n);
        let r = solve_bus_resistive(&chars, 47.0).unwrap();
        assert!(r.v_bus < 12.0 && r.v_bus > 11.0);
        let p = solve_bus_constant_power(&chars, 3.0).unwrap();
        let supplied: f64 = p.i_out.iter().sum();
        assert!((supplied * p.v_bus - 3.0).abs() < 1e-9);
    }
}
