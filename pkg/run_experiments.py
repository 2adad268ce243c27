#!/usr/bin/env python3
"""
Reproduction Experiments Runner
Rotating-coil eccentricity, crossed-coil coupling, bootstrap uncertainty
and nonlinear attenuation on synthetic spectra.
"""

import sys
import os

# Add the src directory to Python path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from nvphasor.experiments import run_reproduction_experiments

if __name__ == "__main__":
    print("Starting reproduction experiments...")
    print("Every run uses synthetic spectra from the forward model.")
    print("Expected runtime: 5-15 minutes\n")

    try:
        results = run_reproduction_experiments()
        print("\nExperiments completed successfully!")

    except KeyboardInterrupt:
        print("\nExperiments interrupted by user.")
    except Exception as e:
        print(f"\nError running experiments: {e}")
        import traceback
        traceback.print_exc()
