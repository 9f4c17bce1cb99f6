#pragma once

#include <ostream>
#include <string>

#include <nlohmann/json.hpp>

#include "muvo/data.hpp"
#include "muvo/trainer.hpp"

namespace muvo {

inline nlohmann::json to_json(const ClassificationReport& r) {
    return {{"count", r.count},
            {"accuracy", r.accuracy},
            {"macro_recall", r.macro_recall},
            {"recall_std", r.recall_std},
            {"per_class_recall", r.recall},
            {"confusion", r.confusion}};
}

inline nlohmann::json to_json(const LossBreakdown& l) {
    nlohmann::json j;
    for (std::size_t i = 0; i < kTermCount; ++i) j[kTermNames[i]] = l.value[i];
    j["total"] = l.total;
    j["mask_rate"] = l.mask_rate;
    return j;
}

/// One line of the metrics stream.
inline nlohmann::json to_json(const EvalRecord& r) {
    nlohmann::json j;
    j["iteration"] = r.iteration;
    j["val"] = r.val.count ? to_json(r.val) : nlohmann::json(nullptr);
    j["test"] = to_json(r.test);
    j["pseudo_label_histogram"] = r.pseudo_label_histogram;
    j["pseudo_label_accuracy"] = r.pseudo_label_accuracy ? nlohmann::json(*r.pseudo_label_accuracy) : nlohmann::json(nullptr);
    j["theta"] = r.theta;
    j["queue_occupancy"] = r.queue_occupancy;
    j["prototypes_initialized"] = r.prototypes_initialized;
    j["last_step"] = {{"iteration", r.last_step.iteration},
                      {"lr", r.last_step.lr},
                      {"lambda_con", r.last_step.lambda_con},
                      {"admitted", r.last_step.admitted},
                      {"affinity_active", r.last_step.affinity_active},
                      {"losses", to_json(r.last_step.losses)}};
    return j;
}

inline constexpr const char* kSummaryHeader =
    "iteration,val_accuracy,test_accuracy,test_macro_recall,test_recall_std,pseudo_label_accuracy,lr,lambda_con,"
    "loss_sup,loss_dcl,loss_ncl,loss_con,loss_ctr,loss_clu,loss_total,mask_rate,prototypes_initialized,queued_features";

inline void write_summary_row(std::ostream& os, const EvalRecord& r) {
    std::size_t queued = 0;
    for (auto q : r.queue_occupancy) queued += q;
    const auto& L = r.last_step.losses;
    os << r.iteration << ',' << (r.val.count ? format_double(r.val.accuracy) : "") << ','
       << format_double(r.test.accuracy) << ',' << format_double(r.test.macro_recall) << ','
       << format_double(r.test.recall_std) << ','
       << (r.pseudo_label_accuracy ? format_double(*r.pseudo_label_accuracy) : "") << ','
       << format_double(r.last_step.lr) << ',' << format_double(r.last_step.lambda_con);
    for (double v : L.value) os << ',' << format_double(v);
    os << ',' << format_double(L.total) << ',' << format_double(L.mask_rate) << ',' << r.prototypes_initialized << ','
       << queued << '\n';
}

}  // namespace muvo
