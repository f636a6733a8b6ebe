#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace hvdpo {

// Per-timestep beta/alpha tables. Timesteps run 1..T; alpha_bar(0) == 1 by
// convention. Stored in double so the cumulative products stay trustworthy.
struct NoiseSchedule {
    int steps = 0;
    std::vector<double> betas;       // beta_t, index t-1
    std::vector<double> alphas;      // 1 - beta_t
    std::vector<double> alpha_bars;  // prod_{s<=t} alpha_s

    double beta(int t) const { return betas[check(t) - 1]; }
    double alpha(int t) const { return alphas[check(t) - 1]; }

    double alpha_bar(int t) const {
        if (t == 0) return 1.0;
        return alpha_bars[check(t) - 1];
    }

  private:
    int check(int t) const {
        if (t < 1 || t > steps) {
            throw std::runtime_error("schedule: timestep " + std::to_string(t) +
                                     " outside [1," + std::to_string(steps) + "]");
        }
        return t;
    }
};

inline NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw std::runtime_error("schedule: need at least one step");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw std::runtime_error("schedule: require 0 < beta_start <= beta_end < 1, got " +
                                 std::to_string(beta_start) + ".." + std::to_string(beta_end));
    }
    NoiseSchedule s;
    s.steps = steps;
    s.betas.resize(steps);
    s.alphas.resize(steps);
    s.alpha_bars.resize(steps);
    double running = 1.0;
    for (int i = 0; i < steps; ++i) {
        double b = steps == 1 ? beta_start
                              : beta_start + (beta_end - beta_start) * i / (steps - 1);
        s.betas[i] = b;
        s.alphas[i] = 1.0 - b;
        running *= s.alphas[i];
        s.alpha_bars[i] = running;
    }
    return s;
}

// Frames flagged clean are exempt from noising, denoising and loss terms.
// Frame 0 is always clean: the first frame carries the conditioning content.
struct FrameMask {
    std::vector<char> keep_clean;

    explicit FrameMask(std::vector<char> flags) : keep_clean(std::move(flags)) {
        if (keep_clean.empty() || !keep_clean[0]) {
            throw std::runtime_error("frame mask: frame 0 must be kept clean");
        }
    }

    static FrameMask clean_first(int frames) {
        std::vector<char> flags(static_cast<size_t>(frames), 0);
        flags[0] = 1;
        return FrameMask(std::move(flags));
    }

    int frames() const { return static_cast<int>(keep_clean.size()); }

    bool clean(int frame) const { return keep_clean[static_cast<size_t>(frame)] != 0; }

    int noised_count() const {
        int n = 0;
        for (char c : keep_clean) n += c ? 0 : 1;
        return n;
    }
};

}  // namespace hvdpo
