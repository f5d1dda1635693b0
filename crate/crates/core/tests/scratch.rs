//! Exploration runs (ignored by default); used to calibrate the
//! acceptance scenarios.

use polorb_core::continuation::*;
use polorb_core::correct::*;
use polorb_core::moser::from_regularized;
use polorb_core::ode::OdeOptions;
use polorb_core::propagate::propagate_reg;
use polorb_core::seeds::{vertical_collision_seed, Hemisphere};
use polorb_core::stability::*;
use polorb_core::*;

fn describe(branch: &Branch, name: &str) {
    println!("== {name}: {} orbits, termination {:?}", branch.entries.len(), branch.termination);
    for e in &branch.events {
        println!("   event {:?} at {:.5} bracket {:?}", e.kind, e.parameter, e.bracket);
    }
    if let Some(first) = branch.entries.first() {
        println!("   first h = {:.4}, classes {:?}", first.parameter, first.spectrum.classes);
    }
    if let Some(last) = branch.entries.last() {
        println!("   last  h = {:.4}, classes {:?}", last.parameter, last.spectrum.classes);
    }
}

#[test]
#[ignore]
fn explore_pitchfork_and_halo() {
    let (_, seed) = vertical_collision_seed(-0.9, Hemisphere::North).unwrap();
    let cfg = ContinuationConfig::default();
    let branch = continue_energy(&seed, -0.8, None, &cfg, |_| {}).unwrap();
    describe(&branch, "vc around pitchfork");
    let pf = branch
        .events
        .iter()
        .find(|e| e.kind == BifurcationKind::Pitchfork)
        .expect("pitchfork");
    println!("pitchfork at {}", pf.parameter);
    let kids = switch_branch(&branch, pf, None, &cfg).unwrap();
    println!("children: {}", kids.len());
    for (i, k) in kids.iter().enumerate() {
        let st = from_regularized(&k.state, &k.model).unwrap();
        println!(
            "  child {i}: h {:.4} tau {:.4} sym {:?} q = ({:.4}, {:.4}, {:.4})",
            k.model.energy, k.tau, k.symmetry, st.q[0], st.q[1], st.q[2]
        );
    }

    // Continue the first child downward through the family.
    let halo = rebase_symmetric(&kids[0], SymmetryKind::Ry, &cfg).unwrap_or(kids[0]);
    println!("halo base: sym {:?}", halo.symmetry);
    let cfg2 = ContinuationConfig { max_orbits: 400, max_step: 0.02, ..Default::default() };
    let hb = continue_pseudo_arclength_reg(&halo, -1.0, (-2.2, -0.5), &cfg2, |_| {}).unwrap();
    describe(&hb, "halo family (reg arclength)");
    // Energy profile and chart position along the branch.
    for (i, e) in hb.entries.iter().enumerate() {
        if i % 20 == 0 || i + 1 == hb.entries.len() {
            if let PeriodicOrbit::Regularized(o) = &e.orbit {
                let xi0 = o.state.xi[0];
                let st = from_regularized(&o.state, &o.model).unwrap();
                println!(
                    "  [{i}] h = {:.4} xi0 = {:.3} q1 = {:.4} q3 = {:.4} stable={} cz={:?}",
                    e.parameter,
                    xi0,
                    st.q[0],
                    st.q[2],
                    e.spectrum.is_linearly_stable(),
                    cz_index_adaptive(o).map(|r| r.index)
                );
            }
        }
    }
}

#[test]
#[ignore]
fn explore_butterfly() {
    let (_, seed) = vertical_collision_seed(-1.12, Hemisphere::North).unwrap();
    let cfg = ContinuationConfig::default();
    let branch = continue_energy(&seed, -0.95, None, &cfg, |_| {}).unwrap();
    let pd = branch
        .events
        .iter()
        .find(|e| e.kind == BifurcationKind::PeriodDoubling)
        .expect("pd");
    println!("pd at {}", pd.parameter);
    let kids = switch_branch(&branch, pd, None, &cfg).unwrap();
    println!("children: {}", kids.len());
    let bf = kids[0];
    println!("butterfly: h {:.4} tau {:.4} sym {:?}", bf.model.energy, bf.tau, bf.symmetry);
    // Trace through its fold (paper: first decreasing h, then fold, then up).
    let cfg2 = ContinuationConfig { max_orbits: 250, max_step: 0.01, ..Default::default() };
    let bb = continue_pseudo_arclength_reg(&bf, -1.0, (-1.4, -0.8), &cfg2, |_| {}).unwrap();
    describe(&bb, "butterfly family");
    for (i, e) in bb.entries.iter().enumerate() {
        if i % 15 == 0 || i + 1 == bb.entries.len() {
            if let PeriodicOrbit::Regularized(o) = &e.orbit {
                println!(
                    "  [{i}] h = {:.5} stable={} classes {:?} cz={:?}",
                    e.parameter,
                    e.spectrum.is_linearly_stable(),
                    e.spectrum.classes,
                    cz_index_adaptive(o).map(|r| r.index)
                );
            }
        }
    }
}

#[test]
#[ignore]
fn explore_lemma_correspondence() {
    // Fat halo: switch at the pitchfork and walk down in energy, then
    // compare regularized and unregularized multipliers.
    let (_, seed) = vertical_collision_seed(-0.9, Hemisphere::North).unwrap();
    let cfg = ContinuationConfig::default();
    let branch = continue_energy(&seed, -0.8, None, &cfg, |_| {}).unwrap();
    let pf = branch.events.iter().find(|e| e.kind == BifurcationKind::Pitchfork).unwrap();
    let kids = switch_branch(&branch, pf, None, &cfg).unwrap();
    let halo = rebase_symmetric(&kids[0], SymmetryKind::Ry, &cfg).unwrap();
    let hb = continue_energy(&halo, -1.00, Some(SymmetryKind::Ry), &cfg, |_| {}).unwrap();
    describe(&hb, "halo down to -1.0");
    let opts = OdeOptions { dense: false, ..OdeOptions::default() };
    for e in hb.entries.iter().rev().take(5) {
        if let PeriodicOrbit::Regularized(o) = &e.orbit {
            let run = propagate_reg(&o.state, &o.model, o.tau, &OdeOptions::default()).unwrap();
            let t_phys = polorb_core::propagate::physical_time(&run);
            let unreg_state = from_regularized(&o.state, &o.model).unwrap();
            let uo = UnregOrbit {
                model: o.model.base,
                c: o.model.energy,
                state: unreg_state,
                period: t_phys,
                residual: 0.0,
            };
            let m8 = monodromy_reg(o, &opts).unwrap();
            let s8 = nontrivial_multipliers_reg(&m8, &o.state, &o.model).unwrap();
            let m6 = monodromy_unreg(&uo, &opts).unwrap();
            let s6 = nontrivial_multipliers_unreg(&m6, &uo.state, &uo.model).unwrap();
            println!(
                "h = {:.4}: reg sigma = {:?}, unreg sigma = {:?}",
                e.parameter, s8.sigma, s6.sigma
            );
            println!(
                "    cz reg = {:?} unreg = {:?}",
                cz_index_adaptive(o).map(|r| r.index),
                cz_index_unreg_adaptive(&uo).map(|r| r.index)
            );
        }
    }
}
