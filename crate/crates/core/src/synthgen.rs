//! Deterministic simulator of hourly server KPIs with labeled anomalies.
//!
//! Each channel (cpu, memory, every disk) follows a baseline plus a daily
//! sinusoid plus AR(1) noise; disks also fill up linearly and are cleaned on
//! a fixed period. Anomaly events raise one to three channels by a multiple
//! of the channel's noise level for one to three hours, preceded by a short
//! ramp, and every anomalous hour emits an alarm.
//!
//! Event counts are fixed quotas derived from the target imbalance ratio, so
//! a fleet realizes its ratio up to rounding.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use chrono::Duration;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{AlarmRecord, KpiRecord, KpiTriple, SeverityLevel, Timestamp};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Business line a fleet belongs to; each has its own typical imbalance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Business {
    Biz,
    Mon,
    Ora,
    Trd,
}

impl Business {
    pub const ALL: [Business; 4] = [Business::Biz, Business::Mon, Business::Ora, Business::Trd];

    /// Normal hours per anomalous hour.
    pub fn default_imbalance(self) -> f64 {
        match self {
            Business::Biz => 70.0,
            Business::Mon => 60.0,
            Business::Ora => 40.0,
            Business::Trd => 275.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Business::Biz => "Biz",
            Business::Mon => "Mon",
            Business::Ora => "Ora",
            Business::Trd => "Trd",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Business {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Business {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Business::ALL
            .into_iter()
            .find(|b| b.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown business tag {s:?}")))
    }
}

/// Dynamics of one KPI channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub baseline: f64,
    /// Half peak-to-peak of the daily cycle.
    pub daily_amplitude: f64,
    /// Hour of the daily peak.
    pub peak_hour: f64,
    /// AR(1) coefficient in `[0, 1)`.
    pub ar_coef: f64,
    /// Standard deviation of the AR(1) innovations.
    pub noise_scale: f64,
    /// Mean half-width of the hourly max/min band around the average.
    pub spread: f64,
    /// Growth per hour between cleanups (disks).
    pub drift_per_hour: f64,
}

impl ChannelProfile {
    /// Stationary standard deviation of the AR(1) noise.
    pub fn noise_sigma(&self) -> f64 {
        self.noise_scale / (1.0 - self.ar_coef * self.ar_coef).sqrt()
    }

    /// Standard deviation of the channel's normal hourly level: AR(1) noise,
    /// the daily cycle and, for a filling disk, the sawtooth between
    /// cleanups. Anomaly sizes are multiples of this.
    pub fn variability(&self, cleanup_period: usize) -> f64 {
        let fill = self.drift_per_hour * cleanup_period as f64;
        (self.noise_sigma().powi(2) + self.daily_amplitude.powi(2) / 2.0 + fill * fill / 12.0).sqrt()
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ar_coef) {
            return Err(Error::InvalidParameter("AR coefficient must be in [0, 1)".into()));
        }
        if self.noise_scale < 0.0 || self.spread < 0.0 || self.daily_amplitude < 0.0 {
            return Err(Error::InvalidParameter("scales must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerProfile {
    pub server_id: String,
    pub business: Business,
    pub cpu: ChannelProfile,
    pub mem: ChannelProfile,
    pub disks: Vec<ChannelProfile>,
    /// Hours between disk cleanups.
    pub cleanup_period: usize,
}

pub const DEFAULT_DISK_COUNT: usize = 2;

impl ServerProfile {
    /// Randomized profiles for `servers` servers of one business line.
    pub fn fleet(business: Business, servers: usize, disk_count: usize, seed: u64) -> Vec<ServerProfile> {
        (0..servers)
            .map(|i| {
                let mut rng = stream(seed, &[0, business.index(), i as u64]);
                ServerProfile::random(format!("{}-{:03}", business.name().to_lowercase(), i), business, disk_count, &mut rng)
            })
            .collect()
    }

    fn random(server_id: String, business: Business, disk_count: usize, rng: &mut ChaCha8Rng) -> Self {
        let busy = rng.random_range(12.0..16.0);
        let cpu = ChannelProfile {
            baseline: rng.random_range(0.30..0.40),
            daily_amplitude: rng.random_range(0.06..0.12),
            peak_hour: busy,
            ar_coef: rng.random_range(0.5..0.8),
            noise_scale: rng.random_range(0.015..0.025),
            spread: rng.random_range(0.04..0.07),
            drift_per_hour: 0.0,
        };
        let mem = ChannelProfile {
            baseline: rng.random_range(0.45..0.55),
            daily_amplitude: rng.random_range(0.03..0.06),
            peak_hour: busy + rng.random_range(0.0..2.0),
            ar_coef: rng.random_range(0.6..0.9),
            noise_scale: rng.random_range(0.008..0.015),
            spread: rng.random_range(0.01..0.03),
            drift_per_hour: 0.0,
        };
        let disks = (0..disk_count)
            .map(|_| ChannelProfile {
                baseline: rng.random_range(0.2..0.35),
                daily_amplitude: 0.0,
                peak_hour: 0.0,
                ar_coef: rng.random_range(0.3..0.6),
                noise_scale: rng.random_range(0.008..0.015),
                spread: 0.0,
                drift_per_hour: rng.random_range(0.0003..0.0008),
            })
            .collect();
        Self {
            server_id,
            business,
            cpu,
            mem,
            disks,
            cleanup_period: 168,
        }
    }

    fn channels(&self) -> Vec<&ChannelProfile> {
        let mut out = vec![&self.cpu, &self.mem];
        out.extend(self.disks.iter());
        out
    }
}

/// How an anomaly of one severity shows in the KPIs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Signature {
    /// Channels raised, chosen at random per event.
    pub channels: usize,
    /// Rise in multiples of the channel's [`ChannelProfile::variability`].
    pub sigmas: f64,
    pub duration_hours: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnomalyCampaign {
    /// Normal server-hours per anomalous server-hour; `None` means no anomalies.
    pub imbalance_ratio: Option<f64>,
    /// Relative share of anomalous hours at low, medium and high severity.
    pub severity_mix: [f64; 3],
    /// Signatures for low, medium and high.
    pub signatures: [Signature; 3],
    /// Random factor range applied to each event's magnitude.
    pub magnitude_jitter: f64,
    /// Hours of rising deviation before an event starts.
    pub precursor_hours: usize,
    /// Deviation reached just before onset, as a fraction of the event's.
    pub precursor_peak: f64,
    /// Quiet hours kept between events on a server.
    pub min_separation: usize,
}

impl Default for AnomalyCampaign {
    fn default() -> Self {
        Self {
            imbalance_ratio: Some(Business::Biz.default_imbalance()),
            severity_mix: [20.0, 5.0, 1.0],
            signatures: [
                Signature {
                    channels: 1,
                    sigmas: 2.0,
                    duration_hours: 1,
                },
                Signature {
                    channels: 2,
                    sigmas: 4.0,
                    duration_hours: 2,
                },
                Signature {
                    channels: 3,
                    sigmas: 6.0,
                    duration_hours: 3,
                },
            ],
            magnitude_jitter: 0.2,
            precursor_hours: 3,
            precursor_peak: 0.6,
            min_separation: 2,
        }
    }
}

impl AnomalyCampaign {
    pub fn for_business(business: Business) -> Self {
        Self {
            imbalance_ratio: Some(business.default_imbalance()),
            ..Self::default()
        }
    }

    pub fn quiet() -> Self {
        Self {
            imbalance_ratio: None,
            ..Self::default()
        }
    }

    /// Events per severity (low, medium, high) for `server_hours` hours.
    pub fn event_quotas(&self, server_hours: usize) -> Result<[usize; 3]> {
        let Some(ratio) = self.imbalance_ratio else {
            return Ok([0; 3]);
        };
        if !(ratio.is_finite() && ratio >= 0.0) {
            return Err(Error::InvalidParameter("imbalance ratio must be >= 0".into()));
        }
        if self.severity_mix.iter().any(|&m| !(m >= 0.0)) || self.severity_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidParameter("severity mix must be non-negative with a positive sum".into()));
        }
        let anomalous = (server_hours as f64 / (ratio + 1.0)).round() as usize;
        let total_mix: f64 = self.severity_mix.iter().sum();
        let durations = self.signatures.map(|s| s.duration_hours.max(1));
        // higher levels first; low absorbs the rounding remainder
        let mut quotas = [0usize; 3];
        let mut used = 0;
        for level in [2, 1] {
            let hours = anomalous as f64 * self.severity_mix[level] / total_mix;
            quotas[level] = (hours / durations[level] as f64).round() as usize;
            used += quotas[level] * durations[level];
        }
        if used > anomalous {
            return Err(Error::InvalidParameter(
                "severity mix cannot be realized with so few anomalous hours".into(),
            ));
        }
        quotas[0] = (anomalous - used) / durations[0];
        Ok(quotas)
    }

    fn validate(&self, channels: usize) -> Result<()> {
        for s in &self.signatures {
            if s.channels == 0 || s.channels > channels {
                return Err(Error::InvalidParameter(format!(
                    "signature needs 1..={channels} channels"
                )));
            }
            if s.duration_hours == 0 || !(s.sigmas >= 0.0) {
                return Err(Error::InvalidParameter("signature duration and size must be positive".into()));
            }
        }
        if !(0.0..1.0).contains(&self.magnitude_jitter) || !(0.0..=1.0).contains(&self.precursor_peak) {
            return Err(Error::InvalidParameter("jitter must be in [0, 1) and precursor peak in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fleet {
    pub kpis: Vec<KpiRecord>,
    pub alarms: Vec<AlarmRecord>,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    level: usize,
    onset: usize,
}

/// Places events on one server without overlap, including precursors and
/// the separation gap.
fn place_events(levels: &[usize], hours: usize, campaign: &AnomalyCampaign, rng: &mut ChaCha8Rng) -> Option<Vec<Event>> {
    let footprint = |level: usize| campaign.precursor_hours + campaign.signatures[level].duration_hours + campaign.min_separation;
    let needed: usize = levels.iter().map(|&l| footprint(l)).sum();
    let lead = campaign.precursor_hours + campaign.min_separation;
    if needed + lead > hours {
        return None;
    }
    // distribute the free hours as random gaps between events in a random order
    let mut order = levels.to_vec();
    order.shuffle(rng);
    let free = hours - needed - lead;
    let mut cuts: Vec<usize> = (0..order.len()).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut events = Vec::with_capacity(order.len());
    let mut cursor = lead;
    let mut prev_cut = 0;
    for (&level, &cut) in order.iter().zip(&cuts) {
        cursor += cut - prev_cut;
        prev_cut = cut;
        events.push(Event { level, onset: cursor });
        cursor += campaign.signatures[level].duration_hours + campaign.min_separation + campaign.precursor_hours;
    }
    Some(events)
}

fn daily(c: &ChannelProfile, hour: usize) -> f64 {
    c.daily_amplitude * (2.0 * PI * (hour as f64 - c.peak_hour) / 24.0).cos()
}

fn unit(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Simulates `hours` hourly records for every profile, starting at `start`.
pub fn generate_fleet(
    profiles: &[ServerProfile],
    hours: usize,
    start: Timestamp,
    campaign: &AnomalyCampaign,
    seed: u64,
) -> Result<Fleet> {
    if hours < 24 {
        return Err(Error::InvalidParameter("at least 24 hours are required".into()));
    }
    if profiles.is_empty() {
        return Err(Error::InvalidParameter("at least one server is required".into()));
    }
    let disk_count = profiles[0].disks.len();
    if profiles.iter().any(|p| p.disks.len() != disk_count) {
        return Err(Error::InvalidParameter("profiles disagree on disk count".into()));
    }
    for p in profiles {
        for c in p.channels() {
            c.validate()?;
        }
    }
    let n_channels = 2 + disk_count;
    campaign.validate(n_channels)?;
    let quotas = campaign.event_quotas(profiles.len() * hours)?;

    // deal events to servers round-robin after a seeded shuffle
    let mut rng = stream(seed, &[1]);
    let mut all: Vec<usize> = (0..3).flat_map(|l| std::iter::repeat_n(l, quotas[l])).collect();
    all.shuffle(&mut rng);
    let mut per_server: Vec<Vec<usize>> = vec![Vec::new(); profiles.len()];
    for (i, level) in all.into_iter().enumerate() {
        per_server[i % profiles.len()].push(level);
    }

    let mut kpis = Vec::with_capacity(profiles.len() * hours);
    let mut alarms = Vec::new();
    for (s, profile) in profiles.iter().enumerate() {
        let mut rng = stream(seed, &[2, s as u64]);
        let events = place_events(&per_server[s], hours, campaign, &mut rng).ok_or_else(|| {
            Error::InvalidParameter(format!(
                "anomaly rate too high: {} events do not fit in {hours} hours on {}",
                per_server[s].len(),
                profile.server_id
            ))
        })?;
        // deviation per hour and channel, and the labeled level per hour
        let mut dev = vec![vec![0.0; n_channels]; hours];
        let mut label = vec![0usize; hours];
        let channels = profile.channels();
        for e in &events {
            let sig = campaign.signatures[e.level];
            let mut chosen: Vec<usize> = (0..n_channels).collect();
            chosen.shuffle(&mut rng);
            chosen.truncate(sig.channels);
            chosen.sort_unstable();
            let jitter = 1.0 + campaign.magnitude_jitter * rng.random_range(-1.0..=1.0);
            for &c in &chosen {
                let size = sig.sigmas * jitter * channels[c].variability(profile.cleanup_period);
                for h in 0..sig.duration_hours {
                    dev[e.onset + h][c] += size;
                }
                for j in 1..=campaign.precursor_hours {
                    let frac = campaign.precursor_peak * (campaign.precursor_hours + 1 - j) as f64
                        / campaign.precursor_hours as f64;
                    dev[e.onset - j][c] += frac * size;
                }
            }
            for h in 0..sig.duration_hours {
                label[e.onset + h] = e.level + 1;
            }
        }

        let mut ar: Vec<f64> = channels
            .iter()
            .map(|c| {
                let z: f64 = StandardNormal.sample(&mut rng);
                c.noise_sigma() * z
            })
            .collect();
        let disk_phase: Vec<usize> = profile.disks.iter().map(|_| rng.random_range(0..profile.cleanup_period.max(1))).collect();
        for h in 0..hours {
            let ts = start + Duration::hours(h as i64);
            let mut level = vec![0.0; n_channels];
            for (c, ch) in channels.iter().enumerate() {
                let eps: f64 = StandardNormal.sample(&mut rng);
                ar[c] = ch.ar_coef * ar[c] + ch.noise_scale * eps;
                let fill = if c >= 2 {
                    let age = (h + disk_phase[c - 2]) % profile.cleanup_period.max(1);
                    ch.drift_per_hour * age as f64
                } else {
                    0.0
                };
                level[c] = ch.baseline + daily(ch, h) + fill + ar[c] + dev[h][c];
            }
            let mut triple = |c: usize| {
                let ch = channels[c];
                let up = ch.spread * rng.random_range(0.5..1.5);
                let down = ch.spread * rng.random_range(0.5..1.5);
                let avg = level[c];
                KpiTriple::new(unit(avg + up), unit(avg - down), unit(avg))
            };
            let cpu = triple(0);
            let mem = triple(1);
            kpis.push(KpiRecord {
                server_id: profile.server_id.clone(),
                timestamp: ts,
                cpu,
                mem,
                disks: (2..n_channels).map(|c| unit(level[c])).collect(),
            });
            if label[h] > 0 {
                let sev = SeverityLevel::from_code(label[h] as u8).expect("anomalous code");
                alarms.push(AlarmRecord::new(
                    profile.server_id.clone(),
                    ts,
                    sev,
                    format!("{} usage anomaly", sev.name()),
                )?);
            }
        }
    }
    Ok(Fleet { kpis, alarms })
}

/// Counts of the damage done by [`corrupt`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionReport {
    pub rows_deleted: usize,
    pub values_out_of_range: usize,
    pub duplicates_inserted: usize,
}

/// Deletes each row with probability `missing_rate`, then gives each
/// surviving row probability `noise_rate` of damage: either one reading is
/// pushed outside `[0, 1]` or an exact duplicate is inserted after it.
///
/// Out-of-range values only go to a triple's max (above 1), a triple's min
/// (below 0) or a disk, so clamping them back never breaks triple order.
pub fn corrupt(records: &[KpiRecord], missing_rate: f64, noise_rate: f64, seed: u64) -> Result<(Vec<KpiRecord>, CorruptionReport)> {
    for r in [missing_rate, noise_rate] {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::InvalidParameter("rates must be in [0, 1)".into()));
        }
    }
    let mut rng = stream(seed, &[3]);
    let mut report = CorruptionReport::default();
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        if rng.random_bool(missing_rate) {
            report.rows_deleted += 1;
            continue;
        }
        if !rng.random_bool(noise_rate) {
            out.push(rec.clone());
            continue;
        }
        if rng.random_bool(0.5) {
            out.push(rec.clone());
            out.push(rec.clone());
            report.duplicates_inserted += 1;
            continue;
        }
        let mut bad = rec.clone();
        let above = 1.0 + rng.random_range(0.01..0.5);
        let below = -rng.random_range(0.01..0.5);
        let slot = rng.random_range(0..4 + bad.disks.len());
        match slot {
            0 => bad.cpu.max = above,
            1 => bad.cpu.min = below,
            2 => bad.mem.max = above,
            3 => bad.mem.min = below,
            d => bad.disks[d - 4] = if rng.random_bool(0.5) { above } else { below },
        }
        report.values_out_of_range += 1;
        out.push(bad);
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::fixtures::t0;
    use crate::ingest::clean;

    fn small(campaign: &AnomalyCampaign, seed: u64) -> Fleet {
        let profiles = ServerProfile::fleet(Business::Biz, 4, 2, seed);
        generate_fleet(&profiles, 600, t0(), campaign, seed).unwrap()
    }

    #[test]
    fn quiet_campaign_has_no_alarms() {
        let f = small(&AnomalyCampaign::quiet(), 1);
        assert!(f.alarms.is_empty());
        assert_eq!(f.kpis.len(), 2400);
    }

    #[test]
    fn same_seed_same_fleet() {
        let c = AnomalyCampaign::default();
        assert_eq!(small(&c, 5), small(&c, 5));
        assert_ne!(small(&c, 5).kpis, small(&c, 6).kpis);
    }

    #[test]
    fn output_is_clean() {
        let f = small(&AnomalyCampaign::for_business(Business::Ora), 2);
        let (_, report) = clean(&f.kpis);
        assert!(report.is_zero(), "{report}");
    }

    #[test]
    fn realized_ratio_matches() {
        for b in Business::ALL {
            let profiles = ServerProfile::fleet(b, 20, 2, 9);
            let f = generate_fleet(&profiles, 2000, t0(), &AnomalyCampaign::for_business(b), 9).unwrap();
            let anomalous = f.alarms.len() as f64;
            let ratio = (f.kpis.len() as f64 - anomalous) / anomalous;
            let target = b.default_imbalance();
            assert!((ratio - target).abs() <= 0.05 * target, "{b}: {ratio}");
        }
    }

    #[test]
    fn infeasible_rate_is_an_error() {
        let c = AnomalyCampaign {
            imbalance_ratio: Some(0.5),
            ..Default::default()
        };
        let profiles = ServerProfile::fleet(Business::Biz, 2, 2, 0);
        assert!(generate_fleet(&profiles, 100, t0(), &c, 0).is_err());
    }

    #[test]
    fn severity_deviation_is_graded() {
        let profiles = ServerProfile::fleet(Business::Ora, 10, 2, 4);
        let quiet = generate_fleet(&profiles, 1500, t0(), &AnomalyCampaign::quiet(), 4).unwrap();
        let noisy = generate_fleet(&profiles, 1500, t0(), &AnomalyCampaign::for_business(Business::Ora), 4).unwrap();
        // same seed: the difference between the two runs is the injected deviation plus resampled noise,
        // so grade against the channel sums of each alarm hour
        let index: std::collections::HashMap<_, _> =
            noisy.kpis.iter().map(|r| ((r.server_id.clone(), r.timestamp), r)).collect();
        let mut sums = [0.0; 3];
        let mut counts = [0usize; 3];
        for a in &noisy.alarms {
            let r = index[&(a.server_id.clone(), a.timestamp)];
            let p = profiles.iter().find(|p| p.server_id == a.server_id).unwrap();
            let mut excess = (r.cpu.avg - p.cpu.baseline) / p.cpu.variability(168) + (r.mem.avg - p.mem.baseline) / p.mem.variability(168);
            for (d, ch) in r.disks.iter().zip(&p.disks) {
                excess += (d - ch.baseline) / ch.variability(168);
            }
            let l = a.severity.code() as usize - 1;
            sums[l] += excess;
            counts[l] += 1;
        }
        let mean: Vec<f64> = (0..3).map(|l| sums[l] / counts[l] as f64).collect();
        assert!(mean[2] > mean[1] && mean[1] > mean[0], "{mean:?}");
        assert!(quiet.alarms.is_empty());
    }

    #[test]
    fn corruption_round_trips_through_clean() {
        let f = small(&AnomalyCampaign::default(), 3);
        let (bad, rep) = corrupt(&f.kpis, 0.1, 0.05, 11).unwrap();
        let (_, cleaned) = clean(&bad);
        assert_eq!(cleaned.duplicates_removed, rep.duplicates_inserted);
        assert_eq!(cleaned.values_clamped, rep.values_out_of_range);
        assert_eq!(cleaned.triples_repaired, 0);
        assert_eq!(bad.len(), f.kpis.len() - rep.rows_deleted + rep.duplicates_inserted);
        // 2400 rows at 10%: well inside 5 binomial standard deviations
        assert!((rep.rows_deleted as f64 - 240.0).abs() < 5.0 * (2400.0f64 * 0.09).sqrt());
        assert_eq!(corrupt(&f.kpis, 0.0, 0.0, 1).unwrap().0, f.kpis);
    }
}
