//! Exact-test verification: every 2x2 table with total at most 40 against
//! an exact-rational enumeration oracle, plus the chi-squared identity on
//! random tables.

use longit::{fisher_exact, pearson_chi2, CountTable};

/// Exact binomial coefficients up to C(40, 20) fit comfortably in u128.
fn choose(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut num: u128 = 1;
    let mut den: u128 = 1;
    for i in 0..k {
        num *= (n - i) as u128;
        den *= (i + 1) as u128;
        let g = gcd(num, den);
        num /= g;
        den /= g;
    }
    num / den
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Two-sided exact p for a 2x2 table by exact integer arithmetic: table
/// probabilities share the denominator C(n, r1), so comparing numerators
/// is exact and the p-value is a ratio of integers.
fn oracle_p(a: u64, b: u64, c: u64, d: u64) -> f64 {
    let r1 = a + b;
    let c1 = a + c;
    let c2 = b + d;
    let n = a + b + c + d;
    let denom = choose(n, r1);
    let weight = |t: u64| -> u128 {
        if t > c1 || r1 - t > c2 {
            0
        } else {
            choose(c1, t) * choose(c2, r1 - t)
        }
    };
    let observed = weight(a);
    let lo = r1.saturating_sub(c2);
    let hi = c1.min(r1);
    let mut kept: u128 = 0;
    for t in lo..=hi {
        let w = weight(t);
        if w <= observed {
            kept += w;
        }
    }
    kept as f64 / denom as f64
}

#[test]
fn fisher_matches_exact_enumeration_on_all_small_tables() {
    let mut checked = 0u64;
    for n in 0..=40u64 {
        for a in 0..=n {
            for b in 0..=(n - a) {
                for c in 0..=(n - a - b) {
                    let d = n - a - b - c;
                    let table = CountTable::new(
                        vec!["x".into(), "y".into()],
                        vec![a, b],
                        vec![c, d],
                    )
                    .unwrap();
                    let got = fisher_exact(&table).unwrap();
                    let want = oracle_p(a, b, c, d);
                    assert!(
                        (got - want).abs() < 1e-10,
                        "table [[{a},{b}],[{c},{d}]]: {got} vs {want}"
                    );
                    checked += 1;
                }
            }
        }
    }
    assert_eq!(checked, 135_751); // C(44, 4) compositions
}

#[test]
fn chi2_equals_squared_two_proportion_z_on_random_tables() {
    let mut state = 0xfeed_beef_cafe_1234u64;
    let mut next = move |m: u64| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state % m
    };
    let mut done = 0;
    while done < 1000 {
        let a = next(50);
        let b = next(50);
        let c = next(50);
        let d = next(50);
        if a + c == 0 || b + d == 0 || a + b == 0 || c + d == 0 {
            continue;
        }
        let table =
            CountTable::new(vec!["x".into(), "y".into()], vec![a, b], vec![c, d]).unwrap();
        let r = pearson_chi2(&table).unwrap();
        let n1 = (a + c) as f64;
        let n2 = (b + d) as f64;
        let p1 = a as f64 / n1;
        let p2 = b as f64 / n2;
        let pool = (a + b) as f64 / (n1 + n2);
        let z = (p1 - p2) / (pool * (1.0 - pool) * (1.0 / n1 + 1.0 / n2)).sqrt();
        assert!(
            (r.statistic - z * z).abs() < 1e-10,
            "[[{a},{b}],[{c},{d}]]: {} vs {}",
            r.statistic,
            z * z
        );
        done += 1;
    }
}
