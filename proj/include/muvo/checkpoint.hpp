#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "muvo/affinity.hpp"
#include "muvo/data.hpp"
#include "muvo/errors.hpp"
#include "muvo/model.hpp"
#include "muvo/pseudolabel.hpp"
#include "muvo/trainer.hpp"

namespace muvo {

// Text checkpoint, one record per line, numbers in shortest round-trip form:
//
//   muvo-checkpoint 1
//   arch <input_dim> <hidden_dim> <feature_dim> <num_classes> <activation>
//   iteration <t>
//   optimizer <base_lr> <momentum> <lr_gamma> <lr_power> <step_count> <refreshed 0|1>
//   params <n> <v_0> ... <v_{n-1}>
//   velocity <n> <v_0> ... <v_{n-1}>
//   confidence <momentum> <debias_factor> <statistic> <C> <theta_0> ... <theta_{C-1}>
//   prototypes <C> <d> <momentum>
//   prototype <c> <initialized 0|1> <p_0> ... <p_{d-1}>      (C lines)
//   source_bank <C> <capacity>
//   queue <c> <len>                                          (C blocks)
//   feature <f_0> ... <f_{d-1}>                               (len lines, oldest first)
//   end
struct Checkpoint {
    static constexpr int kVersion = 1;

    Network network;
    SgdConfig sgd;
    std::uint64_t optimizer_steps = 0;
    std::vector<double> velocity;
    std::size_t iteration = 0;
    bool schedule_refreshed = false;
    ConfidenceBank confidence;
    PrototypeBank prototypes;
    SourceBank source_bank;

    static Checkpoint from(const Trainer& tr) {
        Checkpoint ck;
        ck.network = tr.network();
        ck.sgd = tr.optimizer().config();
        ck.optimizer_steps = tr.optimizer().step_count();
        ck.velocity.assign(tr.optimizer().velocity().begin(), tr.optimizer().velocity().end());
        ck.iteration = tr.iteration();
        ck.schedule_refreshed = tr.schedule_refreshed();
        ck.confidence = tr.confidence_bank();
        ck.prototypes = tr.prototypes();
        ck.source_bank = tr.source_bank();
        return ck;
    }
};

namespace detail {
inline void write_values(std::ostream& os, std::span<const double> v) {
    for (double x : v) os << ' ' << format_double(x);
}

class LineReader {
public:
    explicit LineReader(std::istream& is) : is_(is) {}

    std::istringstream expect(const std::string& key) {
        std::string line;
        if (!std::getline(is_, line)) throw CorruptFile("checkpoint truncated before '" + key + "'");
        ++lineno_;
        std::istringstream ss(line);
        std::string got;
        ss >> got;
        if (got != key)
            throw CorruptFile("checkpoint line " + std::to_string(lineno_) + ": expected '" + key + "', got '" + got + "'");
        return ss;
    }

private:
    std::istream& is_;
    std::size_t lineno_ = 0;
};

template <class T>
T read_field(std::istringstream& ss, const char* what) {
    std::string tok;
    if (!(ss >> tok)) throw CorruptFile(std::string("checkpoint: missing ") + what);
    if constexpr (std::is_same_v<T, double>) {
        return parse_double(tok, std::string("checkpoint ") + what);
    } else if constexpr (std::is_same_v<T, std::string>) {
        return tok;
    } else {
        T v{};
        auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size())
            throw CorruptFile(std::string("checkpoint: bad integer for ") + what);
        return v;
    }
}

inline std::vector<double> read_values(std::istringstream& ss, std::size_t n, const char* what) {
    std::vector<double> v(n);
    for (auto& x : v) x = read_field<double>(ss, what);
    std::string extra;
    if (ss >> extra) throw CorruptFile(std::string("checkpoint: trailing data after ") + what);
    return v;
}
}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
    const auto& a = ck.network.architecture();
    os << "muvo-checkpoint " << Checkpoint::kVersion << '\n';
    os << "arch " << a.input_dim << ' ' << a.hidden_dim << ' ' << a.feature_dim << ' ' << a.num_classes << ' '
       << to_string(a.activation) << '\n';
    os << "iteration " << ck.iteration << '\n';
    os << "optimizer " << format_double(ck.sgd.base_lr) << ' ' << format_double(ck.sgd.momentum) << ' '
       << format_double(ck.sgd.lr_gamma) << ' ' << format_double(ck.sgd.lr_power) << ' ' << ck.optimizer_steps << ' '
       << (ck.schedule_refreshed ? 1 : 0) << '\n';
    os << "params " << ck.network.parameter_count();
    detail::write_values(os, ck.network.parameters());
    os << "\nvelocity " << ck.velocity.size();
    detail::write_values(os, ck.velocity);
    os << "\nconfidence " << format_double(ck.confidence.momentum()) << ' '
       << format_double(ck.confidence.debias_factor()) << ' ' << to_string(ck.confidence.statistic()) << ' '
       << ck.confidence.num_classes();
    detail::write_values(os, ck.confidence.theta());
    const auto& P = ck.prototypes;
    os << "\nprototypes " << P.num_classes() << ' ' << P.feature_dim() << ' ' << format_double(P.momentum()) << '\n';
    for (std::size_t c = 0; c < P.num_classes(); ++c) {
        os << "prototype " << c << ' ' << (P.initialized(c) ? 1 : 0);
        detail::write_values(os, P.prototype(c));
        os << '\n';
    }
    const auto& Q = ck.source_bank;
    os << "source_bank " << Q.num_classes() << ' ' << Q.capacity() << '\n';
    for (std::size_t c = 0; c < Q.num_classes(); ++c) {
        os << "queue " << c << ' ' << Q.occupancy(c) << '\n';
        for (const auto& f : Q.queue(c)) {
            os << "feature";
            detail::write_values(os, f);
            os << '\n';
        }
    }
    os << "end\n";
}

inline Checkpoint read_checkpoint(std::istream& is) {
    using detail::read_field;
    detail::LineReader in(is);
    Checkpoint ck;
    {
        auto ss = in.expect("muvo-checkpoint");
        const int version = read_field<int>(ss, "version");
        if (version != Checkpoint::kVersion)
            throw CorruptFile("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(Checkpoint::kVersion) + ")");
    }
    Architecture arch;
    {
        auto ss = in.expect("arch");
        arch.input_dim = read_field<std::size_t>(ss, "input_dim");
        arch.hidden_dim = read_field<std::size_t>(ss, "hidden_dim");
        arch.feature_dim = read_field<std::size_t>(ss, "feature_dim");
        arch.num_classes = read_field<std::size_t>(ss, "num_classes");
        try {
            arch.activation = parse_activation(read_field<std::string>(ss, "activation"));
        } catch (const InvalidConfig& e) {
            throw CorruptFile(std::string("checkpoint: ") + e.what());
        }
    }
    try {
        ck.network = Network(arch);
    } catch (const InvalidConfig& e) {
        throw CorruptFile(std::string("checkpoint: ") + e.what());
    }
    {
        auto ss = in.expect("iteration");
        ck.iteration = read_field<std::size_t>(ss, "iteration");
    }
    {
        auto ss = in.expect("optimizer");
        ck.sgd.base_lr = read_field<double>(ss, "base_lr");
        ck.sgd.momentum = read_field<double>(ss, "momentum");
        ck.sgd.lr_gamma = read_field<double>(ss, "lr_gamma");
        ck.sgd.lr_power = read_field<double>(ss, "lr_power");
        ck.optimizer_steps = read_field<std::uint64_t>(ss, "step_count");
        ck.schedule_refreshed = read_field<int>(ss, "refreshed") != 0;
    }
    {
        auto ss = in.expect("params");
        const auto n = read_field<std::size_t>(ss, "param count");
        if (n != ck.network.parameter_count()) throw CorruptFile("checkpoint: parameter count does not match architecture");
        ck.network.set_parameters(detail::read_values(ss, n, "params"));
    }
    {
        auto ss = in.expect("velocity");
        const auto n = read_field<std::size_t>(ss, "velocity count");
        if (n != ck.network.parameter_count()) throw CorruptFile("checkpoint: velocity count does not match architecture");
        ck.velocity = detail::read_values(ss, n, "velocity");
    }
    try {
        auto ss = in.expect("confidence");
        const double momentum = read_field<double>(ss, "bank momentum");
        const double factor = read_field<double>(ss, "debias factor");
        const auto stat = parse_confidence_statistic(read_field<std::string>(ss, "statistic"));
        const auto C = read_field<std::size_t>(ss, "class count");
        if (C != arch.num_classes) throw CorruptFile("checkpoint: confidence bank class count mismatch");
        ck.confidence = ConfidenceBank(C, momentum, factor, stat);
        ck.confidence.set_theta(detail::read_values(ss, C, "theta"));

        auto ps = in.expect("prototypes");
        const auto pc = read_field<std::size_t>(ps, "prototype classes");
        const auto pd = read_field<std::size_t>(ps, "prototype dim");
        const double pm = read_field<double>(ps, "prototype momentum");
        if (pc != arch.num_classes || pd != arch.feature_dim) throw CorruptFile("checkpoint: prototype shape mismatch");
        ck.prototypes = PrototypeBank(pc, pd, pm);
        for (std::size_t c = 0; c < pc; ++c) {
            auto ls = in.expect("prototype");
            if (read_field<std::size_t>(ls, "prototype index") != c) throw CorruptFile("checkpoint: prototypes out of order");
            const bool init = read_field<int>(ls, "prototype flag") != 0;
            const auto v = detail::read_values(ls, pd, "prototype");
            if (init) ck.prototypes.set(c, v);
        }

        auto qs = in.expect("source_bank");
        const auto qc = read_field<std::size_t>(qs, "bank classes");
        const auto cap = read_field<std::size_t>(qs, "bank capacity");
        if (qc != arch.num_classes) throw CorruptFile("checkpoint: source bank class count mismatch");
        ck.source_bank = SourceBank(qc, cap);
        for (std::size_t c = 0; c < qc; ++c) {
            auto ls = in.expect("queue");
            if (read_field<std::size_t>(ls, "queue index") != c) throw CorruptFile("checkpoint: queues out of order");
            const auto len = read_field<std::size_t>(ls, "queue length");
            if (len > cap) throw CorruptFile("checkpoint: queue exceeds capacity");
            for (std::size_t i = 0; i < len; ++i) {
                auto fs = in.expect("feature");
                ck.source_bank.push(c, detail::read_values(fs, arch.feature_dim, "feature"));
            }
        }
    } catch (const CorruptFile&) {
        throw;
    } catch (const Error& e) {
        throw CorruptFile(std::string("checkpoint: ") + e.what());
    }
    in.expect("end");
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    write_checkpoint(os, ck);
    if (!os) throw IoError("failed writing '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint '" + path + "'");
    return read_checkpoint(is);
}

}  // namespace muvo
