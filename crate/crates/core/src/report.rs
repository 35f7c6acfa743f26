//! Shared rendering helpers for the reporting surfaces: thousands-separated
//! counts, percentage formatting, and aligned text tables.

/// `1237` -> `"1,237"`.
pub fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// One-decimal percentage: `0.412333` -> `"41.2%"`.
pub fn pct_1dp(fraction: f64) -> String {
    format!("{:.1}%", fraction * 100.0)
}

/// Count with share of total: `(1237, 3000)` -> `"1,237 (41.2%)"`.
pub fn count_pct(n: usize, total: usize) -> String {
    let share = if total == 0 { 0.0 } else { n as f64 / total as f64 };
    format!("{} ({})", thousands(n), pct_1dp(share))
}

/// Relative improvement of `new` over `baseline`: `(new - baseline) / |baseline|`.
pub fn improvement(new: f64, baseline: f64) -> f64 {
    (new - baseline) / baseline.abs()
}

/// Plain-text table: first column left-aligned, the rest right-aligned.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let n_cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(n_cols) {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let render_row = |cells: Vec<&str>, widths: &[usize]| -> String {
        let mut line = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            if i == 0 {
                line.push_str(&format!("{:<width$}", cell, width = widths[i]));
            } else {
                line.push_str(&format!("{:>width$}", cell, width = widths[i]));
            }
        }
        line.trim_end().to_string()
    };
    out.push_str(&render_row(headers.to_vec(), &widths));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (n_cols - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&render_row(row.iter().map(|s| s.as_str()).collect(), &widths));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousands_separators() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(999), "999");
        assert_eq!(thousands(1_237), "1,237");
        assert_eq!(thousands(3_000), "3,000");
        assert_eq!(thousands(1_234_567), "1,234,567");
    }

    #[test]
    fn count_pct_reference_format() {
        assert_eq!(count_pct(1_237, 3_000), "1,237 (41.2%)");
        assert_eq!(count_pct(822, 3_000), "822 (27.4%)");
        assert_eq!(count_pct(2_059, 3_000), "2,059 (68.6%)");
        assert_eq!(count_pct(1_505, 3_000), "1,505 (50.2%)");
    }

    #[test]
    fn improvement_reference_pairs() {
        // The 4G row reproduces exactly from its printed scores.
        assert_eq!(pct_1dp(improvement(14.973, 11.705)), "27.9%");
        assert_eq!(pct_1dp(improvement(28.636, 27.848)), "2.8%");
        assert_eq!(pct_1dp(improvement(1.0, 1.0)), "0.0%");
        // Negative baselines normalize by magnitude.
        assert!((improvement(0.0899, -0.0482) - 2.865).abs() < 1e-3);
    }

    #[test]
    fn table_alignment() {
        let t = render_table(
            &["Batch", "Total", "Compilable"],
            &[
                vec!["gpt-3.5".into(), "3,000".into(), "1,237 (41.2%)".into()],
                vec!["gpt-4".into(), "3,000".into(), "2,059 (68.6%)".into()],
            ],
        );
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("Batch"));
        assert!(lines[2].contains("1,237 (41.2%)"));
    }
}
