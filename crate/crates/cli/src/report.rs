use loadsim::protocol::{MeanWithError, RunMode, RunRecord};

fn fill_line(label: &str, m: Option<&MeanWithError>) -> String {
    match m {
        Some(m) => format!(
            "{label}: {:.4} +/- {:.4} ({} cycles)\n",
            m.mean, m.std_error, m.samples
        ),
        None => format!("{label}: n/a\n"),
    }
}

/// Plain-text summary of a run.
pub fn render_summary(record: &RunRecord) -> String {
    let s = &record.summary;
    let mode = match record.mode {
        RunMode::Loading => "loading",
        RunMode::Maintenance => "maintenance",
    };
    let mut out = format!(
        "{mode} run, {} cycles, seed {}\n",
        record.cycles.len(),
        record.seed
    );
    out.push_str(&format!(
        "initial transfer rate: {:.1} atoms/cycle\n",
        s.initial_slope_atoms_per_cycle
    ));
    out.push_str(&match s.cycles_to_fill {
        Some(c) => format!("cycles to 99% fill: {c}\n"),
        None => "cycles to 99% fill: not reached\n".to_string(),
    });
    out.push_str(&fill_line(
        "steady-state pre-rearrangement fill",
        s.steady_pre_fill.as_ref(),
    ));
    out.push_str(&fill_line(
        "steady-state post-rearrangement fill",
        s.steady_true_post_fill.as_ref(),
    ));
    out.push_str(&fill_line(
        "steady-state diagnostic post fill",
        s.steady_diagnostic_post_fill.as_ref(),
    ));
    out.push_str(&format!(
        "mean cycle duration: {:.1} ms\n",
        s.mean_cycle_duration_ms
    ));
    if s.total_losses.total() == 0 {
        out.push_str("dominant loss mechanism: none\n");
    } else {
        out.push_str(&format!(
            "dominant loss mechanism: {}\n",
            s.dominant_loss.name()
        ));
    }
    out
}
