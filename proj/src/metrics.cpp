#include "trajprior/metrics.hpp"

#include <cmath>

#include <fmt/format.h>

namespace trajprior {

Protocol parse_protocol(const std::string& name) {
    if (name == "noavg" || name == "NoAvg") return Protocol::NoAvg;
    if (name == "temavg" || name == "TemAvg") return Protocol::TemAvg;
    throw ConfigError("unknown protocol '" + name + "' (expected noavg or temavg)");
}

const char* protocol_name(Protocol p) { return p == Protocol::NoAvg ? "noavg" : "temavg"; }

std::array<double, kFutureSteps> per_step_l2(const TrajectoryPair& pair) {
    std::array<double, kFutureSteps> l{};
    for (std::size_t i = 0; i < kFutureSteps; ++i) {
        l[i] = std::hypot(pair.truth[i].x - pair.predicted[i].x, pair.truth[i].y - pair.predicted[i].y);
    }
    return l;
}

namespace {

template <typename T>
HorizonScores horizons(const std::array<T, kFutureSteps>& v, Protocol protocol) {
    double h[3];
    for (std::size_t k = 1; k <= 3; ++k) {
        if (protocol == Protocol::NoAvg) {
            h[k - 1] = static_cast<double>(v[2 * k - 1]);
        } else {
            double s = 0.0;
            for (std::size_t i = 0; i < 2 * k; ++i) s += static_cast<double>(v[i]);
            h[k - 1] = s / static_cast<double>(2 * k);
        }
    }
    return {h[0], h[1], h[2], (h[0] + h[1] + h[2]) / 3.0};
}

} // namespace

HorizonScores l2_at_horizons(const std::array<double, kFutureSteps>& l, Protocol protocol) {
    return horizons(l, protocol);
}

HorizonScores collision_at_horizons(const std::array<int, kFutureSteps>& series, Protocol protocol) {
    for (int c : series) {
        if (c != 0 && c != 1) throw ConfigError("collision indicators must be 0 or 1");
    }
    return horizons(series, protocol);
}

std::array<int, kFutureSteps> collision_series(const std::array<Point2, kFutureSteps>& predicted, const Box& obstacle,
                                               double ego_length, double ego_width) {
    std::array<int, kFutureSteps> out{};
    for (std::size_t i = 0; i < kFutureSteps; ++i) {
        const bool overlap_x = std::abs(predicted[i].x - obstacle.cx) < 0.5 * (ego_length + obstacle.length);
        const bool overlap_y = std::abs(predicted[i].y - obstacle.cy) < 0.5 * (ego_width + obstacle.width);
        out[i] = overlap_x && overlap_y ? 1 : 0;
    }
    return out;
}

EvalRow evaluate_dataset(const std::vector<TrajectoryPair>& pairs,
                         const std::vector<std::array<int, kFutureSteps>>& collisions, Protocol protocol) {
    if (pairs.size() != collisions.size()) throw DimensionError("evaluate_dataset: pair and collision counts differ");
    EvalRow row{protocol, {}, {}};
    if (pairs.empty()) return row;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const HorizonScores l = l2_at_horizons(per_step_l2(pairs[i]), protocol);
        const HorizonScores c = collision_at_horizons(collisions[i], protocol);
        row.l2.h1 += l.h1, row.l2.h2 += l.h2, row.l2.h3 += l.h3, row.l2.avg += l.avg;
        row.collision.h1 += c.h1, row.collision.h2 += c.h2, row.collision.h3 += c.h3, row.collision.avg += c.avg;
    }
    const double n = static_cast<double>(pairs.size());
    for (double* v : {&row.l2.h1, &row.l2.h2, &row.l2.h3, &row.l2.avg}) *v /= n;
    for (double* v : {&row.collision.h1, &row.collision.h2, &row.collision.h3, &row.collision.avg}) *v *= 100.0 / n;
    return row;
}

std::string eval_csv(const std::vector<EvalRow>& rows) {
    std::string out = "protocol,l2_1s,l2_2s,l2_3s,l2_avg,coll_1s,coll_2s,coll_3s,coll_avg\n";
    for (const auto& r : rows) {
        out += fmt::format("{},{:.6f},{:.6f},{:.6f},{:.6f},{:.4f},{:.4f},{:.4f},{:.4f}\n", protocol_name(r.protocol),
                           r.l2.h1, r.l2.h2, r.l2.h3, r.l2.avg, r.collision.h1, r.collision.h2, r.collision.h3,
                           r.collision.avg);
    }
    return out;
}

// ---------------------------------------------------------------------------

void validate_stage_a(const StageASample& s) {
    for (int f : {s.alpha, s.beta, s.gamma}) {
        if (f != 0 && f != 1) throw ConfigError("stage-A task indicators must be 0 or 1");
    }
    if (s.probs.empty() || s.probs.size() != s.one_hot.size()) {
        throw ConfigError("stage-A probability and label vectors must be non-empty and equal length");
    }
    double total = 0.0;
    int ones = 0;
    for (std::size_t k = 0; k < s.probs.size(); ++k) {
        if (!(s.probs[k] >= 0.0 && s.probs[k] <= 1.0)) throw ConfigError("probability outside [0, 1]");
        total += s.probs[k];
        if (s.one_hot[k] == 1.0) {
            ++ones;
        } else if (s.one_hot[k] != 0.0) {
            throw ConfigError("label vector is not one-hot");
        }
    }
    if (std::abs(total - 1.0) > 1e-6) throw ConfigError(fmt::format("probabilities sum to {}, not 1", total));
    if (ones != 1) throw ConfigError("label vector must contain exactly one 1");
}

double stage_a_loss(const std::vector<StageASample>& batch) {
    if (batch.empty()) throw ConfigError("stage_a_loss: empty batch");
    double total = 0.0;
    for (const auto& s : batch) {
        validate_stage_a(s);
        double ce = 0.0;
        for (std::size_t k = 0; k < s.probs.size(); ++k) ce -= s.one_hot[k] * std::log(std::max(s.probs[k], 1e-12));
        double sz = 0.0;
        for (std::size_t m = 0; m < 3; ++m) sz += (s.size[m] - s.size_hat[m]) * (s.size[m] - s.size_hat[m]);
        const double dd = s.distance - s.distance_hat;
        total += s.alpha * ce + s.beta * sz / 3.0 + s.gamma * dd * dd;
    }
    return total / static_cast<double>(batch.size());
}

double trajectory_regression_loss(const std::vector<StageBSample>& batch) {
    if (batch.empty()) throw ConfigError("trajectory_regression_loss: empty batch");
    double total = 0.0;
    for (const auto& s : batch) {
        for (std::size_t q = 0; q < 3; ++q) {
            for (std::size_t c = 0; c < 3; ++c) {
                const double d = s.predicted[q][c] - s.truth[q][c];
                total += d * d;
            }
        }
    }
    return total / static_cast<double>(3 * batch.size());
}

template <typename Real>
NodeId build_stage_a_loss(Tape<Real>& tape, const std::vector<StageASample>& batch) {
    if (batch.empty()) throw ConfigError("stage_a_loss: empty batch");
    const std::size_t B = batch.size(), K = batch[0].probs.size();
    BasicTensor<Real> probs({B, K}), eta_alpha({B, K}), size({B, 3}), size_t_({B, 3}), w_size({B, 3});
    BasicTensor<Real> dist({B, 1}), dist_t({B, 1}), w_dist({B, 1});
    for (std::size_t b = 0; b < B; ++b) {
        const auto& s = batch[b];
        validate_stage_a(s);
        if (s.probs.size() != K) throw DimensionError("stage_a_loss: class counts differ within the batch");
        for (std::size_t k = 0; k < K; ++k) {
            probs[b * K + k] = static_cast<Real>(s.probs[k]);
            // -alpha * eta / B folded into one weight
            eta_alpha[b * K + k] = static_cast<Real>(-s.alpha * s.one_hot[k] / static_cast<double>(B));
        }
        for (std::size_t m = 0; m < 3; ++m) {
            size[b * 3 + m] = static_cast<Real>(s.size_hat[m]);
            size_t_[b * 3 + m] = static_cast<Real>(s.size[m]);
            w_size[b * 3 + m] = static_cast<Real>(s.beta / (3.0 * static_cast<double>(B)));
        }
        dist[b] = static_cast<Real>(s.distance_hat);
        dist_t[b] = static_cast<Real>(s.distance);
        w_dist[b] = static_cast<Real>(s.gamma / static_cast<double>(B));
    }
    NodeId p = tape.parameter("probs", probs);
    NodeId ce = tape.sum(tape.mul(tape.log_clamped(p, static_cast<Real>(1e-12)), tape.constant(eta_alpha)));
    NodeId ds = tape.sub(tape.parameter("size", size), tape.constant(size_t_));
    NodeId sz = tape.sum(tape.mul(tape.mul(ds, ds), tape.constant(w_size)));
    NodeId dd = tape.sub(tape.parameter("distance", dist), tape.constant(dist_t));
    NodeId dl = tape.sum(tape.mul(tape.mul(dd, dd), tape.constant(w_dist)));
    NodeId loss = tape.add(tape.add(ce, sz), dl);
    tape.set_label(loss, "stage_a.loss");
    return loss;
}

template <typename Real>
NodeId build_regression_loss(Tape<Real>& tape, const std::vector<StageBSample>& batch) {
    if (batch.empty()) throw ConfigError("trajectory_regression_loss: empty batch");
    const std::size_t B = batch.size();
    BasicTensor<Real> pred({B * 3, 3}), truth({B * 3, 3});
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t q = 0; q < 3; ++q) {
            for (std::size_t c = 0; c < 3; ++c) {
                pred[(b * 3 + q) * 3 + c] = static_cast<Real>(batch[b].predicted[q][c]);
                truth[(b * 3 + q) * 3 + c] = static_cast<Real>(batch[b].truth[q][c]);
            }
        }
    }
    NodeId d = tape.sub(tape.parameter("pred", pred), tape.constant(truth));
    NodeId loss = tape.scale(tape.sum(tape.mul(d, d)), static_cast<Real>(1.0 / (3.0 * static_cast<double>(B))));
    tape.set_label(loss, "regression.loss");
    return loss;
}

template NodeId build_stage_a_loss(Tape<float>&, const std::vector<StageASample>&);
template NodeId build_stage_a_loss(Tape<double>&, const std::vector<StageASample>&);
template NodeId build_regression_loss(Tape<float>&, const std::vector<StageBSample>&);
template NodeId build_regression_loss(Tape<double>&, const std::vector<StageBSample>&);

} // namespace trajprior
