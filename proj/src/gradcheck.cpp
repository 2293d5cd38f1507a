#include "coot/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace coot {

namespace {

template <typename S>
double fd_slope(const Tape& tape, Tape::Buffers<S>& buf, std::int32_t leaf,
                std::size_t elem, std::int32_t out, double h) {
    const S base = S(tape.node_at(std::size_t(leaf)).value[elem]);
    tape.replay_forward<S>(buf, leaf, elem, S(h));
    double fp = double(buf.val[std::size_t(out)][0]);
    tape.replay_forward<S>(buf, leaf, elem, -S(h));
    double fm = double(buf.val[std::size_t(out)][0]);
    // Divide by the actually-representable step so scalar-type rounding of
    // x +/- h does not bias the quotient.
    double span = double(S(base + S(h))) - double(S(base - S(h)));
    return (fp - fm) / span;
}

} // namespace

GradCheckReport grad_check(Tape& tape, Var output, const GradCheckOptions& opts) {
    COOT_CHECK(output.valid(), "grad_check: invalid output var");
    auto leaves = tape.grad_leaves();

    // Analytic gradients.
    std::vector<std::vector<double>> analytic(leaves.size());
    if (opts.analytic_double) {
        Tape::Buffers<double> buf;
        tape.replay_forward<double>(buf);
        tape.replay_backward<double>(buf, output.id);
        for (std::size_t li = 0; li < leaves.size(); ++li)
            analytic[li] = buf.grad[std::size_t(leaves[li])];
    } else {
        tape.backward(output);
        for (std::size_t li = 0; li < leaves.size(); ++li) {
            const Tensor& g = tape.node_at(std::size_t(leaves[li])).grad;
            analytic[li].assign(g.data(), g.data() + g.size());
        }
    }

    GradCheckReport report;
    Tape::Buffers<double> bufd;
    Tape::Buffers<float> buff;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        const Node& leaf = tape.node_at(std::size_t(leaves[li]));
        const std::string name =
            leaf.param != nullptr ? leaf.param->name : str("leaf#", leaves[li]);
        for (std::size_t e = 0; e < leaf.value.size(); ++e) {
            double numeric =
                opts.fd_double
                    ? fd_slope<double>(tape, bufd, leaves[li], e, output.id,
                                       opts.step)
                    : fd_slope<float>(tape, buff, leaves[li], e, output.id,
                                      opts.step);
            double a = analytic[li][e];
            COOT_CHECK(std::isfinite(a) && std::isfinite(numeric),
                       "grad_check: non-finite gradient for ", name, "[", e, "]");
            double denom =
                std::max({std::fabs(a), std::fabs(numeric), opts.denom_floor});
            double rel = std::fabs(a - numeric) / denom;
            ++report.checked;
            if (rel > report.max_rel_err) report.max_rel_err = rel;
            if (report.worst.size() < opts.worst_k ||
                rel > report.worst.back().rel_err) {
                GradCheckEntry entry{name, e, a, numeric, rel};
                auto pos = std::upper_bound(
                    report.worst.begin(), report.worst.end(), rel,
                    [](double r, const GradCheckEntry& x) { return r > x.rel_err; });
                report.worst.insert(pos, entry);
                if (report.worst.size() > opts.worst_k) report.worst.pop_back();
            }
        }
    }
    return report;
}

} // namespace coot
