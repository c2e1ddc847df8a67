use proptest::prelude::*;
use thingtwin_core::env::{
    generate_ambient, make_plant_env, make_virtual_env, plant_params, run_thermostat_episode, MdpConfig, Thermostat,
    PLANT_KIND,
};
use thingtwin_core::occupancy::RoomProfile;
use thingtwin_core::thermal::{
    evaluate_mse, fit, simulate, ExogenousInput, FitOptions, ModelKind, ObservedSeries, ThermalModelParams,
    ThermalState,
};

fn square_wave_inputs(days: usize, period: usize, seed: u64) -> Vec<ExogenousInput> {
    generate_ambient(days, seed)
        .values
        .into_iter()
        .enumerate()
        .map(|(k, t_a)| ExogenousInput {
            t_a,
            a: if (k / period) % 2 == 0 { 1.0 } else { 0.0 },
        })
        .collect()
}

fn observe(kind: ModelKind, p: &ThermalModelParams, inputs: &[ExogenousInput]) -> ObservedSeries {
    let states = simulate(kind, p, ThermalState::at(17.0), inputs, 15.0).unwrap();
    let mut t_i = vec![17.0];
    t_i.extend(states[..states.len() - 1].iter().map(|s| s.t_i));
    ObservedSeries {
        t_i,
        t_a: inputs.iter().map(|u| u.t_a).collect(),
        action: inputs.iter().map(|u| u.a).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, failure_persistence: None, ..ProptestConfig::default() })]

    // second-order twin recovered from a week of noise-free data
    #[test]
    fn tith_fit_recovers_generator(
        c_h in 0.2f64..1.0,
        r_ia in 3.0f64..12.0,
        r_ih in 0.5f64..2.0,
        phi_h in 1.0f64..5.0,
        period in 3usize..9,
    ) {
        let p = ThermalModelParams { c_i: 1.0, c_h, r_ia, r_ih, phi_h, ..Default::default() };
        let obs = observe(ModelKind::TiTh, &p, &square_wave_inputs(7, period, 1));
        let f = fit(ModelKind::TiTh, &obs, 15.0, &FitOptions { starts: 8, ..Default::default() }).unwrap();
        prop_assert!(f.params.max_relative_error(&p, ModelKind::TiTh) < 1e-3, "{:?}", f.params);
        prop_assert!(evaluate_mse(ModelKind::TiTh, &f.params, &obs, 15.0) < 1e-9);
    }
}

#[test]
fn gauge_rescaled_generator_gives_identical_data() {
    let p = plant_params(RoomProfile::LivingRoom);
    let scaled = ThermalModelParams {
        c_i: 3.0,
        c_e: p.c_e * 3.0,
        c_h: p.c_h * 3.0,
        r_ia: p.r_ia / 3.0,
        r_ie: p.r_ie / 3.0,
        r_ea: p.r_ea / 3.0,
        r_ih: p.r_ih / 3.0,
        phi_h: p.phi_h * 3.0,
        sigma: 0.0,
    };
    let inputs = square_wave_inputs(3, 6, 2);
    let a = observe(PLANT_KIND, &p, &inputs);
    let b = observe(PLANT_KIND, &scaled, &inputs);
    for (x, y) in a.t_i.iter().zip(&b.t_i) {
        assert!((x - y).abs() < 1e-9);
    }
    assert!(scaled.max_relative_error(&p, PLANT_KIND) < 1e-12);
}

#[test]
fn environments_replay_under_the_same_seed() {
    let cfg = MdpConfig {
        episode_len: 300,
        ..Default::default()
    };
    let run = |seed| {
        let mut env = make_plant_env(RoomProfile::Bedroom, cfg.clone(), seed).unwrap();
        run_thermostat_episode(&mut env, &mut Thermostat::manual(RoomProfile::Bedroom), 0)
            .unwrap()
            .1
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));

    let occ = RoomProfile::Bathroom.occupancy();
    let ambient = generate_ambient(10, 3);
    let mut twin = make_virtual_env(PLANT_KIND, plant_params(RoomProfile::Bathroom), occ, ambient, cfg, 9).unwrap();
    let (m, trace) = run_thermostat_episode(&mut twin, &mut Thermostat::constant(19.0), 0).unwrap();
    assert_eq!(trace.len(), 300);
    assert!(m.mean_reward <= m.ideal_reward + 1e-12);
}
