#pragma once

// Oracle suites shared by `kronlvm_cli verify` and the acceptance binary.

#include <functional>
#include <string>
#include <vector>

namespace verify {

struct SuiteResult {
    std::string name;
    bool passed = false;
    double worst = 0.0;      // worst error observed
    double threshold = 0.0;  // pass requires worst < threshold
    std::string detail;
    double seconds = 0.0;
};

SuiteResult kron_oracle_suite();      // structured SGPR vs dense GP
SuiteResult bound_oracle_suite();     // SGPLVM bound pieces and test term vs dense transcriptions
SuiteResult gradient_suite();         // bound gradients vs central differences
SuiteResult psi_mc_suite(long samples = 1000000);
SuiteResult fem_suite();

struct NamedSuite {
    std::string name;
    std::function<SuiteResult()> run;
};
[[nodiscard]] std::vector<NamedSuite> all_suites();

}  // namespace verify
